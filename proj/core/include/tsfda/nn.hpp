#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tsfda/rng.hpp"
#include "tsfda/tensor.hpp"

namespace tsfda {

enum class LayerKind {
  Conv1d,
  FactorizedConv1d,
  BatchNorm1d,
  ReLU,
  MaxPool1d,
  AdaptiveAvgPool1d,
  Linear,
  FactorizedLinear,
  Dropout,
};

enum class ParamTag { Backbone, Core, Factor, Bn, Classifier, Adapter, Imputer };

std::string to_string(LayerKind k);
std::string to_string(ParamTag t);
LayerKind layer_kind_from_string(const std::string& s);
ParamTag param_tag_from_string(const std::string& s);

enum class AdapterKind { LoRA, LoKrA };

/// How a LoRA adapter wraps a rank-3 kernel: ModeRank uses a rank-(r,r)
/// core of shape (r, r, K) with per-channel-mode projections; Flatten uses a
/// plain B.A delta on the (C_out x C_in*K) matricization.
enum class ConvLoraStyle { ModeRank, Flatten };

struct AdapterAttachment {
  AdapterKind kind = AdapterKind::LoRA;
  ConvLoraStyle style = ConvLoraStyle::ModeRank;
  Index rank = 0;                      // LoRA rank
  std::array<Index, 4> kron{0, 0, 0, 0};  // LoKrA factor shapes a1,a2,b1,b2
  double scaling = 1.0;
};

struct LayerSpec {
  LayerKind kind{};
  std::string name;
  Index c_in = 0, c_out = 0;  // channels (convs/bn) or in/out features (linear)
  Index kernel = 0, stride = 1, padding = 0;
  Index r_in = 0, r_out = 0;  // factorized ranks; r_in == 0 => input mode kept whole
  Index pool = 0, pool_stride = 0, pool_padding = 0;
  Index out_len = 0;   // AdaptiveAvgPool1d target length
  double rate = 0.0;   // dropout probability
  bool has_bias = false;
  std::optional<AdapterAttachment> adapter;
};

/// Output sequence length of a layer given its input length (identity for
/// pointwise layers).
Index layer_out_len(const LayerSpec& spec, Index in_len);

struct ModelGraph {
  std::vector<LayerSpec> layers;  // backbone layers, then classifier layers
  Index backbone_end = 0;         // layers [0, backbone_end) form the backbone h
  std::vector<LayerSpec> imputer;  // feature-space imputation head j (may be empty)

  std::map<std::string, DenseTensor> params;  // trainable, tag-addressed
  std::map<std::string, ParamTag> tags;
  std::map<std::string, DenseTensor> state;  // BN running statistics
  std::map<std::string, std::string> meta;   // provenance: seeds, rank factor, method

  Index input_channels = 0, input_len = 0, num_classes = 0;

  Index feature_dim() const;  // flattened backbone output size for one sample
  bool is_factorized() const;
  const LayerSpec* find_layer(const std::string& name) const;
  LayerSpec* find_layer(const std::string& name);
  void validate() const;  // shape-consistency walk; throws on mismatch
};

struct Batch {
  DenseTensor inputs;            // (B, M, L)
  std::vector<int> labels;       // optional; empty when unlabeled
  std::optional<DenseTensor> mask;  // optional boolean tensor matching inputs
};

struct BackboneConfig {
  Index input_channels = 1;
  Index input_len = 128;
  Index num_classes = 5;
  Index mid_channels = 32;    // block channels are (mid, 2*mid, final)
  Index final_channels = 128;
  Index kernel1 = 25, kernel2 = 8, kernel3 = 8;
  Index stride1 = 6;
  double dropout = 0.0;  // 0 disables the block-1 dropout entirely
  bool conv_bias = false;
  Index features_len = 1;  // adaptive-pool target length
};

/// Three conv-BN-ReLU-MaxPool blocks, adaptive average pooling, and a linear
/// classifier; optionally a 2-layer MLP imputation head on the features.
ModelGraph build_cnn(const BackboneConfig& cfg, std::uint64_t init_seed,
                     bool with_imputer = false);

enum class Mode { Train, Eval };

struct LayerCache {
  DenseTensor in;
  Index in_len = 0;
  Shape pre_flatten;  // original input shape when a linear layer flattened it
  // factorized conv / adapter intermediates
  DenseTensor down, core_out;
  DenseTensor adapter_in, adapter_mid, adapter_core_out, adapter_delta;
  // batchnorm
  DenseTensor xhat, batch_mean, batch_var;
  // maxpool winners, flat input offsets parallel to the output tensor
  std::vector<Index> argmax;
  // dropout keep-mask already scaled by 1/(1-rate)
  DenseTensor dropout_mask;
};

struct StackCache {
  std::vector<LayerCache> layers;
  DenseTensor out;
};

struct ForwardResult {
  DenseTensor logits;    // (B, K)
  DenseTensor features;  // (B, F) flattened backbone output
  StackCache backbone_cache;
  StackCache classifier_cache;
};

/// Train-mode forward: uses batch statistics, updates BN running stats in
/// place, samples dropout from `rng`, and records caches for backward.
ForwardResult forward_train(ModelGraph& m, const DenseTensor& x, Rng& rng);

/// Eval-mode forward: running statistics, no dropout, no model mutation.
ForwardResult forward_eval(const ModelGraph& m, const DenseTensor& x);

using GradMap = std::map<std::string, DenseTensor>;

/// Reverse pass matching a train-mode forward. `dfeatures`, when given, is an
/// extra gradient injected at the flattened feature node.
GradMap backward(const ModelGraph& m, const ForwardResult& fr, const DenseTensor& dlogits,
                 const DenseTensor* dfeatures = nullptr);

/// Imputer head forward on flattened features (B, F) -> (B, F).
DenseTensor imputer_forward(const ModelGraph& m, const DenseTensor& features, Mode mode,
                            StackCache* cache);

/// Backward through the imputer head; adds its parameter gradients into
/// `grads` and returns the gradient w.r.t. the head input.
DenseTensor imputer_backward(const ModelGraph& m, const StackCache& cache,
                             const DenseTensor& dout, GradMap& grads);

/// Backward through the backbone alone given the gradient at the flattened
/// features; used for auxiliary branches that bypass the classifier.
void backbone_backward(const ModelGraph& m, const StackCache& cache,
                       const DenseTensor& dfeatures, GradMap& grads);

struct SubspaceMask {
  std::set<ParamTag> enabled;
  bool all_backbone = false;  // expands to {Backbone, Core, Factor, Bn}

  bool enables(ParamTag t) const;
  bool empty() const { return enabled.empty() && !all_backbone; }

  static SubspaceMask none();
  static SubspaceMask of(std::initializer_list<ParamTag> tags);
  static SubspaceMask everything();  // pretraining: all tags incl. classifier/imputer
  /// Accepts the CLI names: core, factors, both, bn, full, adapter, none, all.
  static SubspaceMask parse(const std::string& name);
  std::string to_string() const;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, DenseTensor> m, v;
  Index t = 0;
};

/// Per-step instrumentation for the distance-bound audits: the inf-norm of
/// the applied update divided by lr, and the raw gradient inf-norm.
struct StepStats {
  std::map<std::string, double> update_inf_over_lr;
  std::map<std::string, double> grad_inf;
};

/// Applies one Adam step to every parameter whose tag the mask enables.
/// Disabled parameters (and their optimizer state) are untouched.
void adam_step(ModelGraph& m, const GradMap& grads, const SubspaceMask& mask,
               const AdamConfig& cfg, AdamState& st, StepStats* stats = nullptr);

/// Argmax class per row of logits.
std::vector<int> argmax_rows(const DenseTensor& logits);

/// Row-wise softmax.
DenseTensor softmax_rows(const DenseTensor& logits);

/// Converts a gradient w.r.t. softmax probabilities into a gradient w.r.t.
/// logits: dz = p .* (dp - <dp, p>) per row.
DenseTensor softmax_backward_rows(const DenseTensor& probs, const DenseTensor& dprobs);

}  // namespace tsfda
