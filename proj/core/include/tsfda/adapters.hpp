#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "tsfda/nn.hpp"

namespace tsfda {

/// Residual adapter request. LoRA on a matrix weight is the usual B.A delta
/// (B zero-initialized). On rank-3 kernels the default style is a rank-(r,r)
/// Tucker-structured delta: core (r,r,K) with channel-mode projections, which
/// is what the published parameter counts correspond to; `Flatten` switches
/// to B.A on the (C_out x C_in*K) matricization. LoKrA is a Kronecker-product
/// delta A (x) B with factor shapes per layer (balanced split by default).
struct AdapterSpec {
  AdapterKind kind = AdapterKind::LoRA;
  Index rank = 4;
  double alpha = 0.0;  // scaling = alpha / rank; alpha == 0 means scaling 1
  ConvLoraStyle conv_style = ConvLoraStyle::ModeRank;
  std::map<std::string, std::array<Index, 4>> kron_shapes;  // layer -> a1,a2,b1,b2
  std::vector<std::string> layers;  // restrict to these names; empty = every backbone weight layer
};

/// Weight-bearing backbone layers an adapter can wrap (kernel for plain
/// convs, the core tensor for factorized layers, the weight for linears).
std::vector<std::string> adapter_target_layers(const ModelGraph& m, const AdapterSpec& spec);

/// Attaches adapter parameters (tagged Adapter) to the targeted layers. The
/// delta starts at zero, so logits are unchanged until training moves the
/// adapter. Base weights are left in place; freezing them is the mask's job.
void attach_adapters(ModelGraph& m, const AdapterSpec& spec, std::uint64_t seed);

/// Folds every adapter delta into its base weight and removes the adapter
/// parameters; the merged model has the base layer's inference cost again.
void merge_adapters(ModelGraph& m);

/// Trainable parameters the attachment adds to this layer.
Index count_adapter_params(const AdapterAttachment& a, const LayerSpec& l);

/// Total trainable adapter parameters the spec would add to the model.
Index count_adapter_params(const AdapterSpec& spec, const ModelGraph& m);

/// Extra per-sample MACs of the un-merged adapter path through this layer.
Index count_adapter_macs(const AdapterAttachment& a, const LayerSpec& l, Index in_len);

/// Balanced factor pair (a, b), a*b == n, minimizing |a - b|.
std::pair<Index, Index> balanced_factor_pair(Index n);

}  // namespace tsfda
