#include "tsfda/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tsfda {

namespace {

// Channel dims of the tensor the adapter wraps: (in, out, kernel).
struct TargetDims {
  Index in = 0, out = 0, kernel = 1;
  bool is_conv = false;
};

TargetDims target_dims(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::Conv1d:
      return {l.c_in, l.c_out, l.kernel, true};
    case LayerKind::FactorizedConv1d:
      // adapter wraps the core tensor (r_out, r_in or c_in, K)
      return {l.r_in > 0 ? l.r_in : l.c_in, l.r_out, l.kernel, true};
    case LayerKind::Linear:
      return {l.c_in, l.c_out, 1, false};
    case LayerKind::FactorizedLinear:
      return {l.r_in, l.r_out, 1, false};
    default:
      throw std::invalid_argument("layer " + l.name + " cannot carry an adapter");
  }
}

std::string base_param_name(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::Conv1d:
    case LayerKind::Linear:
      return l.name + ".weight";
    case LayerKind::FactorizedConv1d:
    case LayerKind::FactorizedLinear:
      return l.name + ".core";
    default:
      throw std::invalid_argument("layer " + l.name + " has no adapter base weight");
  }
}

bool adapter_eligible(const LayerSpec& l) {
  return l.kind == LayerKind::Conv1d || l.kind == LayerKind::FactorizedConv1d ||
         l.kind == LayerKind::Linear || l.kind == LayerKind::FactorizedLinear;
}

DenseTensor random_uniform(const Shape& shape, Index fan_in, Rng& rng) {
  DenseTensor t(shape);
  const double b = std::sqrt(6.0 / static_cast<double>(std::max<Index>(1, fan_in)));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-b, b);
  return t;
}

std::array<Index, 4> resolve_kron(const AdapterSpec& spec, const LayerSpec& l,
                                  const TargetDims& d) {
  auto it = spec.kron_shapes.find(l.name);
  std::array<Index, 4> k{0, 0, 0, 0};
  if (it != spec.kron_shapes.end()) k = it->second;
  const Index rows = d.out;
  const Index cols = d.in * d.kernel;
  if (k[0] == 0) {
    const auto [a1, b1] = balanced_factor_pair(rows);
    const auto [a2, b2] = balanced_factor_pair(cols);
    k = {a1, a2, b1, b2};
  }
  if (k[0] * k[2] != rows || k[1] * k[3] != cols)
    throw std::invalid_argument("adapter: Kronecker shapes " + std::to_string(k[0]) + "x" +
                                std::to_string(k[1]) + " (x) " + std::to_string(k[2]) + "x" +
                                std::to_string(k[3]) + " do not tile " + std::to_string(rows) +
                                "x" + std::to_string(cols) + " at layer " + l.name);
  return k;
}

}  // namespace

std::pair<Index, Index> balanced_factor_pair(Index n) {
  if (n < 1) throw std::invalid_argument("balanced_factor_pair: n must be positive");
  Index best_a = 1;
  for (Index a = 1; a * a <= n; ++a)
    if (n % a == 0) best_a = a;
  return {best_a, n / best_a};
}

std::vector<std::string> adapter_target_layers(const ModelGraph& m, const AdapterSpec& spec) {
  std::vector<std::string> out;
  for (Index i = 0; i < m.backbone_end; ++i) {
    const LayerSpec& l = m.layers[static_cast<size_t>(i)];
    if (!adapter_eligible(l)) continue;
    if (!spec.layers.empty() &&
        std::find(spec.layers.begin(), spec.layers.end(), l.name) == spec.layers.end())
      continue;
    out.push_back(l.name);
  }
  if (out.empty()) throw std::invalid_argument("adapter: no target layer exists");
  return out;
}

void attach_adapters(ModelGraph& m, const AdapterSpec& spec, std::uint64_t seed) {
  if (spec.kind == AdapterKind::LoRA && spec.rank < 1)
    throw std::invalid_argument("adapter: LoRA rank must be >= 1");
  Rng rng(mix_seed(seed, "adapter_init"));
  const double scaling =
      spec.alpha > 0.0 ? spec.alpha / static_cast<double>(std::max<Index>(1, spec.rank)) : 1.0;

  for (const std::string& name : adapter_target_layers(m, spec)) {
    LayerSpec* l = m.find_layer(name);
    if (l->adapter) throw std::invalid_argument("adapter already attached to " + name);
    const TargetDims d = target_dims(*l);

    AdapterAttachment a;
    a.kind = spec.kind;
    a.scaling = scaling;
    if (spec.kind == AdapterKind::LoRA) {
      a.rank = spec.rank;
      a.style = d.is_conv ? spec.conv_style : ConvLoraStyle::Flatten;
      if (d.is_conv && a.style == ConvLoraStyle::ModeRank) {
        m.params[name + ".adapter.a"] = random_uniform({d.in, spec.rank}, d.in, rng);
        m.params[name + ".adapter.core"] =
            random_uniform({spec.rank, spec.rank, d.kernel}, spec.rank * d.kernel, rng);
        m.params[name + ".adapter.b"] = DenseTensor({d.out, spec.rank});  // zero: delta starts 0
        m.tags[name + ".adapter.a"] = ParamTag::Adapter;
        m.tags[name + ".adapter.core"] = ParamTag::Adapter;
        m.tags[name + ".adapter.b"] = ParamTag::Adapter;
      } else {
        const Index cols = d.in * d.kernel;
        m.params[name + ".adapter.a"] = random_uniform({spec.rank, cols}, cols, rng);
        m.params[name + ".adapter.b"] = DenseTensor({d.out, spec.rank});
        m.tags[name + ".adapter.a"] = ParamTag::Adapter;
        m.tags[name + ".adapter.b"] = ParamTag::Adapter;
      }
    } else {
      const auto k = resolve_kron(spec, *l, d);
      a.kron = k;
      m.params[name + ".adapter.kron_a"] = DenseTensor({k[0], k[1]});  // zero: delta starts 0
      m.params[name + ".adapter.kron_b"] = random_uniform({k[2], k[3]}, k[3], rng);
      m.tags[name + ".adapter.kron_a"] = ParamTag::Adapter;
      m.tags[name + ".adapter.kron_b"] = ParamTag::Adapter;
    }
    l->adapter = a;
  }
}

void merge_adapters(ModelGraph& m) {
  auto merge_layer = [&](LayerSpec& l) {
    if (!l.adapter) return;
    const AdapterAttachment& a = *l.adapter;
    DenseTensor& base = m.params.at(base_param_name(l));
    DenseTensor delta;
    if (a.kind == AdapterKind::LoRA && l.adapter->style == ConvLoraStyle::ModeRank &&
        (l.kind == LayerKind::Conv1d || l.kind == LayerKind::FactorizedConv1d)) {
      TuckerFactors f;
      f.core = m.params.at(l.name + ".adapter.core");
      f.factors = {m.params.at(l.name + ".adapter.b"), m.params.at(l.name + ".adapter.a")};
      f.decomposed_modes = {0, 1};
      delta = reconstruct(f);
    } else if (a.kind == AdapterKind::LoRA) {
      delta = reshape(matmul(m.params.at(l.name + ".adapter.b"), m.params.at(l.name + ".adapter.a")),
                      base.shape());
    } else {
      delta = reshape(
          kronecker(m.params.at(l.name + ".adapter.kron_a"), m.params.at(l.name + ".adapter.kron_b")),
          base.shape());
    }
    if (!delta.same_shape(base))
      throw std::logic_error("adapter merge: delta shape mismatch at " + l.name);
    for (Index i = 0; i < base.size(); ++i) base[i] += a.scaling * delta[i];
    for (const char* suffix : {".adapter.a", ".adapter.b", ".adapter.core", ".adapter.kron_a",
                               ".adapter.kron_b"}) {
      m.params.erase(l.name + suffix);
      m.tags.erase(l.name + suffix);
    }
    l.adapter.reset();
  };
  for (auto& l : m.layers) merge_layer(l);
}

Index count_adapter_params(const AdapterAttachment& a, const LayerSpec& l) {
  const TargetDims d = target_dims(l);
  if (a.kind == AdapterKind::LoRA) {
    if (d.is_conv && a.style == ConvLoraStyle::ModeRank)
      return a.rank * a.rank * d.kernel + a.rank * (d.in + d.out);
    return a.rank * (d.in * d.kernel + d.out);
  }
  return a.kron[0] * a.kron[1] + a.kron[2] * a.kron[3];
}

Index count_adapter_params(const AdapterSpec& spec, const ModelGraph& m) {
  Index total = 0;
  for (const std::string& name : adapter_target_layers(m, spec)) {
    const LayerSpec* l = m.find_layer(name);
    AdapterAttachment a;
    a.kind = spec.kind;
    a.rank = spec.rank;
    a.style = target_dims(*l).is_conv ? spec.conv_style : ConvLoraStyle::Flatten;
    if (spec.kind == AdapterKind::LoKrA) a.kron = resolve_kron(spec, *l, target_dims(*l));
    total += count_adapter_params(a, *l);
  }
  return total;
}

Index count_adapter_macs(const AdapterAttachment& a, const LayerSpec& l, Index in_len) {
  const TargetDims d = target_dims(l);
  if (!d.is_conv) {
    if (a.kind == AdapterKind::LoRA) return d.in * a.rank + a.rank * d.out;
    return d.in * d.out;  // materialized Kronecker delta
  }
  const Index out_len = layer_out_len(l, in_len);
  if (a.kind == AdapterKind::LoRA && a.style == ConvLoraStyle::ModeRank)
    return d.in * a.rank * in_len + a.rank * a.rank * d.kernel * out_len +
           d.out * a.rank * out_len;
  return d.out * d.in * d.kernel * out_len;  // materialized delta kernel
}

}  // namespace tsfda
