#include "tsfda/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>

namespace tsfda {

namespace {
constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;
}  // namespace

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv1d: return "conv1d";
    case LayerKind::FactorizedConv1d: return "factorized_conv1d";
    case LayerKind::BatchNorm1d: return "batchnorm1d";
    case LayerKind::ReLU: return "relu";
    case LayerKind::MaxPool1d: return "maxpool1d";
    case LayerKind::AdaptiveAvgPool1d: return "adaptive_avgpool1d";
    case LayerKind::Linear: return "linear";
    case LayerKind::FactorizedLinear: return "factorized_linear";
    case LayerKind::Dropout: return "dropout";
  }
  return "?";
}

std::string to_string(ParamTag t) {
  switch (t) {
    case ParamTag::Backbone: return "backbone";
    case ParamTag::Core: return "core";
    case ParamTag::Factor: return "factor";
    case ParamTag::Bn: return "bn";
    case ParamTag::Classifier: return "classifier";
    case ParamTag::Adapter: return "adapter";
    case ParamTag::Imputer: return "imputer";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::Conv1d, LayerKind::FactorizedConv1d, LayerKind::BatchNorm1d,
                      LayerKind::ReLU, LayerKind::MaxPool1d, LayerKind::AdaptiveAvgPool1d,
                      LayerKind::Linear, LayerKind::FactorizedLinear, LayerKind::Dropout})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown layer kind: " + s);
}

ParamTag param_tag_from_string(const std::string& s) {
  for (ParamTag t : {ParamTag::Backbone, ParamTag::Core, ParamTag::Factor, ParamTag::Bn,
                     ParamTag::Classifier, ParamTag::Adapter, ParamTag::Imputer})
    if (to_string(t) == s) return t;
  throw std::invalid_argument("unknown parameter tag: " + s);
}

Index layer_out_len(const LayerSpec& spec, Index in_len) {
  switch (spec.kind) {
    case LayerKind::Conv1d:
    case LayerKind::FactorizedConv1d:
      return (in_len + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    case LayerKind::MaxPool1d:
      return (in_len + 2 * spec.pool_padding - spec.pool) / spec.pool_stride + 1;
    case LayerKind::AdaptiveAvgPool1d:
      return spec.out_len;
    default:
      return in_len;
  }
}

Index ModelGraph::feature_dim() const {
  Index ch = input_channels, len = input_len;
  for (Index i = 0; i < backbone_end; ++i) {
    const LayerSpec& s = layers[static_cast<size_t>(i)];
    len = layer_out_len(s, len);
    if (s.kind == LayerKind::Conv1d || s.kind == LayerKind::FactorizedConv1d) ch = s.c_out;
    if (s.kind == LayerKind::Linear || s.kind == LayerKind::FactorizedLinear) {
      ch = s.c_out;
      len = 1;
    }
  }
  return ch * len;
}

bool ModelGraph::is_factorized() const {
  for (Index i = 0; i < backbone_end; ++i) {
    const LayerKind k = layers[static_cast<size_t>(i)].kind;
    if (k == LayerKind::FactorizedConv1d || k == LayerKind::FactorizedLinear) return true;
  }
  return false;
}

const LayerSpec* ModelGraph::find_layer(const std::string& name) const {
  for (const auto& l : layers)
    if (l.name == name) return &l;
  for (const auto& l : imputer)
    if (l.name == name) return &l;
  return nullptr;
}

LayerSpec* ModelGraph::find_layer(const std::string& name) {
  return const_cast<LayerSpec*>(static_cast<const ModelGraph*>(this)->find_layer(name));
}

void ModelGraph::validate() const {
  Index ch = input_channels, len = input_len;
  for (const auto& s : layers) {
    switch (s.kind) {
      case LayerKind::Conv1d:
      case LayerKind::FactorizedConv1d:
        if (s.c_in != ch)
          throw std::invalid_argument("layer " + s.name + ": expects " + std::to_string(s.c_in) +
                                      " channels, gets " + std::to_string(ch));
        ch = s.c_out;
        break;
      case LayerKind::BatchNorm1d:
        if (s.c_in != ch) throw std::invalid_argument("layer " + s.name + ": channel mismatch");
        break;
      case LayerKind::Linear:
      case LayerKind::FactorizedLinear:
        if (s.c_in != ch * len)
          throw std::invalid_argument("layer " + s.name + ": expects " + std::to_string(s.c_in) +
                                      " features, gets " + std::to_string(ch * len));
        ch = s.c_out;
        len = 1;
        break;
      default:
        break;
    }
    len = layer_out_len(s, len);
    if (len < 1) throw std::invalid_argument("layer " + s.name + ": output length collapsed");
  }
}

namespace {

double kaiming_bound(Index fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); }

DenseTensor init_uniform(const Shape& shape, Index fan_in, Rng& rng) {
  DenseTensor t(shape);
  const double b = kaiming_bound(fan_in);
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-b, b);
  return t;
}

void add_param(ModelGraph& m, const std::string& name, DenseTensor value, ParamTag tag) {
  m.params[name] = std::move(value);
  m.tags[name] = tag;
}

}  // namespace

ModelGraph build_cnn(const BackboneConfig& cfg, std::uint64_t init_seed, bool with_imputer) {
  ModelGraph m;
  m.input_channels = cfg.input_channels;
  m.input_len = cfg.input_len;
  m.num_classes = cfg.num_classes;

  Rng rng(mix_seed(init_seed, "init"));

  const std::array<Index, 3> chans = {cfg.mid_channels, 2 * cfg.mid_channels,
                                      cfg.final_channels};
  const std::array<Index, 3> kernels = {cfg.kernel1, cfg.kernel2, cfg.kernel3};
  Index in_ch = cfg.input_channels;
  for (int b = 0; b < 3; ++b) {
    const std::string idx = std::to_string(b + 1);
    LayerSpec conv{};
    conv.kind = LayerKind::Conv1d;
    conv.name = "conv" + idx;
    conv.c_in = in_ch;
    conv.c_out = chans[static_cast<size_t>(b)];
    conv.kernel = kernels[static_cast<size_t>(b)];
    conv.stride = (b == 0) ? cfg.stride1 : 1;
    conv.padding = conv.kernel / 2;
    conv.has_bias = cfg.conv_bias;
    m.layers.push_back(conv);

    LayerSpec bn{};
    bn.kind = LayerKind::BatchNorm1d;
    bn.name = "bn" + idx;
    bn.c_in = bn.c_out = conv.c_out;
    m.layers.push_back(bn);

    LayerSpec relu{};
    relu.kind = LayerKind::ReLU;
    relu.name = "relu" + idx;
    m.layers.push_back(relu);

    LayerSpec pool{};
    pool.kind = LayerKind::MaxPool1d;
    pool.name = "pool" + idx;
    pool.pool = 2;
    pool.pool_stride = 2;
    pool.pool_padding = 1;
    m.layers.push_back(pool);

    if (b == 0 && cfg.dropout > 0.0) {
      LayerSpec drop{};
      drop.kind = LayerKind::Dropout;
      drop.name = "drop1";
      drop.rate = cfg.dropout;
      m.layers.push_back(drop);
    }
    in_ch = conv.c_out;
  }

  LayerSpec gap{};
  gap.kind = LayerKind::AdaptiveAvgPool1d;
  gap.name = "gap";
  gap.out_len = cfg.features_len;
  m.layers.push_back(gap);

  m.backbone_end = static_cast<Index>(m.layers.size());

  const Index feat = cfg.final_channels * cfg.features_len;
  LayerSpec cls{};
  cls.kind = LayerKind::Linear;
  cls.name = "classifier";
  cls.c_in = feat;
  cls.c_out = cfg.num_classes;
  cls.has_bias = true;
  m.layers.push_back(cls);

  // Parameters, in layer order so the init stream is reproducible.
  for (const auto& l : m.layers) {
    if (l.kind == LayerKind::Conv1d) {
      add_param(m, l.name + ".weight", init_uniform({l.c_out, l.c_in, l.kernel}, l.c_in * l.kernel, rng),
                ParamTag::Backbone);
      if (l.has_bias) add_param(m, l.name + ".bias", DenseTensor({l.c_out}), ParamTag::Backbone);
    } else if (l.kind == LayerKind::BatchNorm1d) {
      DenseTensor gamma({l.c_in});
      gamma.fill(1.0);
      add_param(m, l.name + ".gamma", std::move(gamma), ParamTag::Bn);
      add_param(m, l.name + ".beta", DenseTensor({l.c_in}), ParamTag::Bn);
      m.state[l.name + ".running_mean"] = DenseTensor({l.c_in});
      DenseTensor rv({l.c_in});
      rv.fill(1.0);
      m.state[l.name + ".running_var"] = std::move(rv);
    } else if (l.kind == LayerKind::Linear) {
      add_param(m, l.name + ".weight", init_uniform({l.c_out, l.c_in}, l.c_in, rng),
                ParamTag::Classifier);
      if (l.has_bias)
        add_param(m, l.name + ".bias", DenseTensor({l.c_out}), ParamTag::Classifier);
    }
  }

  if (with_imputer) {
    for (int i = 1; i <= 2; ++i) {
      LayerSpec fc{};
      fc.kind = LayerKind::Linear;
      fc.name = "imputer.fc" + std::to_string(i);
      fc.c_in = feat;
      fc.c_out = feat;
      fc.has_bias = true;
      m.imputer.push_back(fc);
      if (i == 1) {
        LayerSpec relu{};
        relu.kind = LayerKind::ReLU;
        relu.name = "imputer.relu";
        m.imputer.push_back(relu);
      }
    }
    for (const auto& l : m.imputer) {
      if (l.kind != LayerKind::Linear) continue;
      add_param(m, l.name + ".weight", init_uniform({l.c_out, l.c_in}, l.c_in, rng),
                ParamTag::Imputer);
      add_param(m, l.name + ".bias", DenseTensor({l.c_out}), ParamTag::Imputer);
    }
  }

  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Raw kernels
// ---------------------------------------------------------------------------

namespace {

// Cross-correlation with zero padding: y[b,o,l'] = sum_{c,k} w[o,c,k] x[b,c,l's+k-p].
DenseTensor conv1d_raw(const DenseTensor& x, const DenseTensor& w, const double* bias,
                       Index stride, Index pad) {
  const Index B = x.extent(0), Cin = x.extent(1), L = x.extent(2);
  const Index Cout = w.extent(0), K = w.extent(2);
  if (w.extent(1) != Cin)
    throw std::invalid_argument("conv1d: kernel expects " + std::to_string(w.extent(1)) +
                                " input channels, activation has " + std::to_string(Cin));
  const Index Lo = (L + 2 * pad - K) / stride + 1;
  if (Lo < 1) throw std::invalid_argument("conv1d: output length collapsed");
  DenseTensor y({B, Cout, Lo});
  for (Index b = 0; b < B; ++b) {
    for (Index o = 0; o < Cout; ++o) {
      double* yrow = y.data() + (b * Cout + o) * Lo;
      for (Index c = 0; c < Cin; ++c) {
        const double* xrow = x.data() + (b * Cin + c) * L;
        const double* wrow = w.data() + (o * Cin + c) * K;
        for (Index lo = 0; lo < Lo; ++lo) {
          const Index base = lo * stride - pad;
          const Index k0 = std::max<Index>(0, -base);
          const Index k1 = std::min<Index>(K, L - base);
          double acc = 0;
          for (Index k = k0; k < k1; ++k) acc += wrow[k] * xrow[base + k];
          yrow[lo] += acc;
        }
      }
      if (bias) {
        for (Index lo = 0; lo < Lo; ++lo) yrow[lo] += bias[o];
      }
    }
  }
  return y;
}

void conv1d_raw_backward(const DenseTensor& x, const DenseTensor& w, const DenseTensor& dy,
                         Index stride, Index pad, DenseTensor* dx, DenseTensor* dw,
                         DenseTensor* dbias) {
  const Index B = x.extent(0), Cin = x.extent(1), L = x.extent(2);
  const Index Cout = w.extent(0), K = w.extent(2);
  const Index Lo = dy.extent(2);
  if (dx) *dx = DenseTensor(x.shape());
  if (dw) *dw = DenseTensor(w.shape());
  if (dbias) *dbias = DenseTensor({Cout});
  for (Index b = 0; b < B; ++b) {
    for (Index o = 0; o < Cout; ++o) {
      const double* dyrow = dy.data() + (b * Cout + o) * Lo;
      if (dbias) {
        double acc = 0;
        for (Index lo = 0; lo < Lo; ++lo) acc += dyrow[lo];
        (*dbias)[o] += acc;
      }
      for (Index c = 0; c < Cin; ++c) {
        const double* xrow = x.data() + (b * Cin + c) * L;
        const double* wrow = w.data() + (o * Cin + c) * K;
        double* dxrow = dx ? dx->data() + (b * Cin + c) * L : nullptr;
        double* dwrow = dw ? dw->data() + (o * Cin + c) * K : nullptr;
        for (Index lo = 0; lo < Lo; ++lo) {
          const double g = dyrow[lo];
          if (g == 0.0) continue;
          const Index base = lo * stride - pad;
          const Index k0 = std::max<Index>(0, -base);
          const Index k1 = std::min<Index>(K, L - base);
          for (Index k = k0; k < k1; ++k) {
            if (dwrow) dwrow[k] += g * xrow[base + k];
            if (dxrow) dxrow[base + k] += g * wrow[k];
          }
        }
      }
    }
  }
}

// 1x1 conv expressed directly: y[b,o,l] = sum_c M[o,c] x[b,c,l].
DenseTensor channel_project(const DenseTensor& x, const DenseTensor& mat) {
  const Index B = x.extent(0), Cin = x.extent(1), L = x.extent(2);
  const Index Cout = mat.extent(0);
  if (mat.extent(1) != Cin) throw std::invalid_argument("channel_project: dimension mismatch");
  DenseTensor y({B, Cout, L});
  for (Index b = 0; b < B; ++b)
    for (Index o = 0; o < Cout; ++o) {
      double* yrow = y.data() + (b * Cout + o) * L;
      for (Index c = 0; c < Cin; ++c) {
        const double m = mat.at2(o, c);
        if (m == 0.0) continue;
        const double* xrow = x.data() + (b * Cin + c) * L;
        for (Index l = 0; l < L; ++l) yrow[l] += m * xrow[l];
      }
    }
  return y;
}

void channel_project_backward(const DenseTensor& x, const DenseTensor& mat, const DenseTensor& dy,
                              DenseTensor* dx, DenseTensor* dmat) {
  const Index B = x.extent(0), Cin = x.extent(1), L = x.extent(2);
  const Index Cout = mat.extent(0);
  if (dx) *dx = DenseTensor(x.shape());
  if (dmat) *dmat = DenseTensor(mat.shape());
  for (Index b = 0; b < B; ++b)
    for (Index o = 0; o < Cout; ++o) {
      const double* dyrow = dy.data() + (b * Cout + o) * L;
      for (Index c = 0; c < Cin; ++c) {
        const double* xrow = x.data() + (b * Cin + c) * L;
        double acc = 0;
        if (dx) {
          double* dxrow = dx->data() + (b * Cin + c) * L;
          const double m = mat.at2(o, c);
          for (Index l = 0; l < L; ++l) {
            acc += dyrow[l] * xrow[l];
            dxrow[l] += m * dyrow[l];
          }
        } else {
          for (Index l = 0; l < L; ++l) acc += dyrow[l] * xrow[l];
        }
        if (dmat) dmat->at2(o, c) += acc;
      }
    }
}

void kron_backward(const DenseTensor& a, const DenseTensor& b, const DenseTensor& dr,
                   DenseTensor* da, DenseTensor* db) {
  const Index a1 = a.extent(0), a2 = a.extent(1), b1 = b.extent(0), b2 = b.extent(1);
  if (da) *da = DenseTensor(a.shape());
  if (db) *db = DenseTensor(b.shape());
  for (Index i = 0; i < a1; ++i)
    for (Index j = 0; j < a2; ++j) {
      double acc = 0;
      for (Index p = 0; p < b1; ++p)
        for (Index q = 0; q < b2; ++q) {
          const double g = dr.at2(i * b1 + p, j * b2 + q);
          acc += g * b.at2(p, q);
          if (db) db->at2(p, q) += g * a.at2(i, j);
        }
      if (da) (*da)[i * a2 + j] += acc;
    }
}

const DenseTensor& require_param(const std::map<std::string, DenseTensor>& params,
                                 const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::invalid_argument("missing parameter: " + name);
  return it->second;
}

// Materialized adapter delta for Flatten-LoRA and LoKrA on a rank-3 kernel
// (r_out x r_in x K or C_out x C_in x K) or a rank-2 weight.
DenseTensor adapter_delta(const LayerSpec& l, const std::map<std::string, DenseTensor>& params,
                          const Shape& target_shape) {
  const AdapterAttachment& a = *l.adapter;
  const Index rows = target_shape[0];
  Index cols = 1;
  for (size_t i = 1; i < target_shape.size(); ++i) cols *= target_shape[i];
  DenseTensor flat;
  if (a.kind == AdapterKind::LoRA) {
    const DenseTensor& A = require_param(params, l.name + ".adapter.a");  // (r, cols)
    const DenseTensor& B = require_param(params, l.name + ".adapter.b");  // (rows, r)
    flat = matmul(B, A);
  } else {
    const DenseTensor& A = require_param(params, l.name + ".adapter.kron_a");
    const DenseTensor& B = require_param(params, l.name + ".adapter.kron_b");
    flat = kronecker(A, B);
    if (flat.extent(0) != rows || flat.extent(1) != cols)
      throw std::invalid_argument("adapter: Kronecker factor shapes do not tile " + l.name);
  }
  return reshape(std::move(flat), target_shape);
}

void adapter_delta_backward(const LayerSpec& l, const std::map<std::string, DenseTensor>& params,
                            const DenseTensor& ddelta, GradMap& grads) {
  const AdapterAttachment& a = *l.adapter;
  DenseTensor dflat = ddelta;
  if (a.kind == AdapterKind::LoRA) {
    const DenseTensor& A = require_param(params, l.name + ".adapter.a");
    const DenseTensor& B = require_param(params, l.name + ".adapter.b");
    dflat = reshape(std::move(dflat), {B.extent(0), A.extent(1)});
    grads[l.name + ".adapter.b"] = matmul(dflat, transpose(A));
    grads[l.name + ".adapter.a"] = matmul(transpose(B), dflat);
  } else {
    const DenseTensor& A = require_param(params, l.name + ".adapter.kron_a");
    const DenseTensor& B = require_param(params, l.name + ".adapter.kron_b");
    dflat = reshape(std::move(dflat), {A.extent(0) * B.extent(0), A.extent(1) * B.extent(1)});
    DenseTensor da, db;
    kron_backward(A, B, dflat, &da, &db);
    grads[l.name + ".adapter.kron_a"] = std::move(da);
    grads[l.name + ".adapter.kron_b"] = std::move(db);
  }
}

bool adapter_is_materialized(const AdapterAttachment& a) {
  return a.kind == AdapterKind::LoKrA || a.style == ConvLoraStyle::Flatten;
}

}  // namespace

DenseTensor softmax_rows(const DenseTensor& logits) {
  const Index B = logits.extent(0), K = logits.extent(1);
  DenseTensor p(logits.shape());
  for (Index b = 0; b < B; ++b) {
    const double* z = logits.data() + b * K;
    double* pr = p.data() + b * K;
    double mx = z[0];
    for (Index k = 1; k < K; ++k) mx = std::max(mx, z[k]);
    double sum = 0;
    for (Index k = 0; k < K; ++k) {
      pr[k] = std::exp(z[k] - mx);
      sum += pr[k];
    }
    for (Index k = 0; k < K; ++k) pr[k] /= sum;
  }
  return p;
}

DenseTensor softmax_backward_rows(const DenseTensor& probs, const DenseTensor& dprobs) {
  const Index B = probs.extent(0), K = probs.extent(1);
  DenseTensor dz(probs.shape());
  for (Index b = 0; b < B; ++b) {
    const double* p = probs.data() + b * K;
    const double* dp = dprobs.data() + b * K;
    double dot = 0;
    for (Index k = 0; k < K; ++k) dot += dp[k] * p[k];
    double* out = dz.data() + b * K;
    for (Index k = 0; k < K; ++k) out[k] = p[k] * (dp[k] - dot);
  }
  return dz;
}

std::vector<int> argmax_rows(const DenseTensor& logits) {
  const Index B = logits.extent(0), K = logits.extent(1);
  std::vector<int> out(static_cast<size_t>(B));
  for (Index b = 0; b < B; ++b) {
    const double* z = logits.data() + b * K;
    Index best = 0;
    for (Index k = 1; k < K; ++k)
      if (z[k] > z[best]) best = k;
    out[static_cast<size_t>(b)] = static_cast<int>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stack forward / backward
// ---------------------------------------------------------------------------

namespace {

struct StackCtx {
  const std::map<std::string, DenseTensor>& params;
  const std::map<std::string, DenseTensor>* state_ro;
  std::map<std::string, DenseTensor>* state_rw;  // non-null in train mode
  Mode mode;
  Rng* rng;  // dropout stream, train mode only
};

DenseTensor run_layer(const LayerSpec& l, const DenseTensor& x0, StackCtx& ctx, LayerCache* cc) {
  DenseTensor x = x0;
  if ((l.kind == LayerKind::Linear || l.kind == LayerKind::FactorizedLinear) && x.order() == 3) {
    if (cc) cc->pre_flatten = x.shape();
    x = reshape(std::move(x), {x.extent(0), x.extent(1) * x.extent(2)});
  }

  if (cc) {
    cc->in = x;
    cc->in_len = x.order() == 3 ? x.extent(2) : 1;
  }

  switch (l.kind) {
    case LayerKind::Conv1d: {
      const DenseTensor& w = require_param(ctx.params, l.name + ".weight");
      const double* bias =
          l.has_bias ? require_param(ctx.params, l.name + ".bias").data() : nullptr;
      DenseTensor y;
      if (l.adapter && adapter_is_materialized(*l.adapter)) {
        DenseTensor delta = adapter_delta(l, ctx.params, w.shape());
        DenseTensor weff = w + scale(delta, l.adapter->scaling);
        if (cc) cc->adapter_delta = std::move(delta);
        y = conv1d_raw(x, weff, bias, l.stride, l.padding);
      } else {
        y = conv1d_raw(x, w, bias, l.stride, l.padding);
        if (l.adapter) {  // mode-rank path: down, core, up
          const DenseTensor& a = require_param(ctx.params, l.name + ".adapter.a");  // (c_in, r)
          const DenseTensor& g = require_param(ctx.params, l.name + ".adapter.core");
          const DenseTensor& b = require_param(ctx.params, l.name + ".adapter.b");  // (c_out, r)
          DenseTensor mid = channel_project(x, transpose(a));
          DenseTensor core_out = conv1d_raw(mid, g, nullptr, l.stride, l.padding);
          DenseTensor up = channel_project(core_out, b);
          for (Index i = 0; i < y.size(); ++i) y[i] += l.adapter->scaling * up[i];
          if (cc) {
            cc->adapter_mid = std::move(mid);
            cc->adapter_core_out = std::move(core_out);
          }
        }
      }
      return y;
    }
    case LayerKind::FactorizedConv1d: {
      const DenseTensor& core = require_param(ctx.params, l.name + ".core");
      const DenseTensor& v1 = require_param(ctx.params, l.name + ".v1");  // (c_out, r_out)
      DenseTensor z = x;
      if (l.r_in > 0) {
        const DenseTensor& v2 = require_param(ctx.params, l.name + ".v2");  // (c_in, r_in)
        z = channel_project(x, transpose(v2));
        if (cc) cc->down = z;
      }
      DenseTensor zc = conv1d_raw(z, core, nullptr, l.stride, l.padding);
      if (l.adapter) {  // adapter wraps the core tensor
        if (adapter_is_materialized(*l.adapter)) {
          DenseTensor delta = adapter_delta(l, ctx.params, core.shape());
          DenseTensor extra = conv1d_raw(z, delta, nullptr, l.stride, l.padding);
          for (Index i = 0; i < zc.size(); ++i) zc[i] += l.adapter->scaling * extra[i];
          if (cc) cc->adapter_delta = std::move(delta);
        } else {
          const DenseTensor& a = require_param(ctx.params, l.name + ".adapter.a");
          const DenseTensor& g = require_param(ctx.params, l.name + ".adapter.core");
          const DenseTensor& b = require_param(ctx.params, l.name + ".adapter.b");
          DenseTensor mid = channel_project(z, transpose(a));
          DenseTensor core_out = conv1d_raw(mid, g, nullptr, l.stride, l.padding);
          DenseTensor up = channel_project(core_out, b);
          for (Index i = 0; i < zc.size(); ++i) zc[i] += l.adapter->scaling * up[i];
          if (cc) {
            cc->adapter_mid = std::move(mid);
            cc->adapter_core_out = std::move(core_out);
          }
        }
      }
      if (cc) cc->core_out = zc;
      DenseTensor y = channel_project(zc, v1);
      if (l.has_bias) {
        const DenseTensor& bias = require_param(ctx.params, l.name + ".bias");
        const Index B = y.extent(0), C = y.extent(1), L = y.extent(2);
        for (Index bi = 0; bi < B; ++bi)
          for (Index c = 0; c < C; ++c) {
            double* row = y.data() + (bi * C + c) * L;
            for (Index t = 0; t < L; ++t) row[t] += bias[c];
          }
      }
      return y;
    }
    case LayerKind::BatchNorm1d: {
      const DenseTensor& gamma = require_param(ctx.params, l.name + ".gamma");
      const DenseTensor& beta = require_param(ctx.params, l.name + ".beta");
      const Index B = x.extent(0), C = x.extent(1), L = x.extent(2);
      DenseTensor y(x.shape());
      if (ctx.mode == Mode::Train) {
        const Index N = B * L;
        DenseTensor mean({C}), var({C});
        for (Index c = 0; c < C; ++c) {
          double s = 0;
          for (Index b = 0; b < B; ++b) {
            const double* row = x.data() + (b * C + c) * L;
            for (Index t = 0; t < L; ++t) s += row[t];
          }
          mean[c] = s / static_cast<double>(N);
          double v = 0;
          for (Index b = 0; b < B; ++b) {
            const double* row = x.data() + (b * C + c) * L;
            for (Index t = 0; t < L; ++t) {
              const double d = row[t] - mean[c];
              v += d * d;
            }
          }
          var[c] = v / static_cast<double>(N);
        }
        DenseTensor xhat(x.shape());
        for (Index c = 0; c < C; ++c) {
          const double inv = 1.0 / std::sqrt(var[c] + kBnEps);
          for (Index b = 0; b < B; ++b) {
            const double* row = x.data() + (b * C + c) * L;
            double* hrow = xhat.data() + (b * C + c) * L;
            double* yrow = y.data() + (b * C + c) * L;
            for (Index t = 0; t < L; ++t) {
              hrow[t] = (row[t] - mean[c]) * inv;
              yrow[t] = gamma[c] * hrow[t] + beta[c];
            }
          }
        }
        if (ctx.state_rw) {
          DenseTensor& rm = (*ctx.state_rw)[l.name + ".running_mean"];
          DenseTensor& rv = (*ctx.state_rw)[l.name + ".running_var"];
          const double unbias = N > 1 ? static_cast<double>(N) / static_cast<double>(N - 1) : 1.0;
          for (Index c = 0; c < C; ++c) {
            rm[c] = (1.0 - kBnMomentum) * rm[c] + kBnMomentum * mean[c];
            rv[c] = (1.0 - kBnMomentum) * rv[c] + kBnMomentum * var[c] * unbias;
          }
        }
        if (cc) {
          cc->xhat = std::move(xhat);
          cc->batch_mean = std::move(mean);
          cc->batch_var = std::move(var);
        }
      } else {
        const DenseTensor& rm = ctx.state_ro->at(l.name + ".running_mean");
        const DenseTensor& rv = ctx.state_ro->at(l.name + ".running_var");
        for (Index c = 0; c < C; ++c) {
          const double inv = 1.0 / std::sqrt(rv[c] + kBnEps);
          for (Index b = 0; b < B; ++b) {
            const double* row = x.data() + (b * C + c) * L;
            double* yrow = y.data() + (b * C + c) * L;
            for (Index t = 0; t < L; ++t) yrow[t] = gamma[c] * (row[t] - rm[c]) * inv + beta[c];
          }
        }
      }
      return y;
    }
    case LayerKind::ReLU: {
      DenseTensor y = x;
      for (Index i = 0; i < y.size(); ++i) y[i] = std::max(0.0, y[i]);
      return y;
    }
    case LayerKind::MaxPool1d: {
      const Index B = x.extent(0), C = x.extent(1), L = x.extent(2);
      const Index Lo = (L + 2 * l.pool_padding - l.pool) / l.pool_stride + 1;
      DenseTensor y({B, C, Lo});
      if (cc) cc->argmax.assign(static_cast<size_t>(B * C * Lo), -1);
      for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < C; ++c) {
          const double* row = x.data() + (b * C + c) * L;
          double* yrow = y.data() + (b * C + c) * Lo;
          for (Index lo = 0; lo < Lo; ++lo) {
            const Index base = lo * l.pool_stride - l.pool_padding;
            const Index k0 = std::max<Index>(0, -base);
            const Index k1 = std::min<Index>(l.pool, L - base);
            double best = -std::numeric_limits<double>::infinity();
            Index arg = -1;
            for (Index k = k0; k < k1; ++k) {
              if (row[base + k] > best) {
                best = row[base + k];
                arg = base + k;
              }
            }
            yrow[lo] = best;
            if (cc) cc->argmax[static_cast<size_t>((b * C + c) * Lo + lo)] = arg;
          }
        }
      return y;
    }
    case LayerKind::AdaptiveAvgPool1d: {
      const Index B = x.extent(0), C = x.extent(1), L = x.extent(2);
      const Index Lo = l.out_len;
      DenseTensor y({B, C, Lo});
      for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < C; ++c) {
          const double* row = x.data() + (b * C + c) * L;
          double* yrow = y.data() + (b * C + c) * Lo;
          for (Index lo = 0; lo < Lo; ++lo) {
            const Index s0 = (lo * L) / Lo;
            const Index s1 = ((lo + 1) * L + Lo - 1) / Lo;
            double acc = 0;
            for (Index t = s0; t < s1; ++t) acc += row[t];
            yrow[lo] = acc / static_cast<double>(s1 - s0);
          }
        }
      return y;
    }
    case LayerKind::Linear: {
      const DenseTensor& w = require_param(ctx.params, l.name + ".weight");  // (out, in)
      const Index B = x.extent(0), In = x.extent(1), Out = w.extent(0);
      if (In != w.extent(1)) throw std::invalid_argument("linear " + l.name + ": shape mismatch");
      DenseTensor y({B, Out});
      for (Index b = 0; b < B; ++b)
        for (Index o = 0; o < Out; ++o) {
          const double* xr = x.data() + b * In;
          const double* wr = w.data() + o * In;
          double acc = 0;
          for (Index i = 0; i < In; ++i) acc += xr[i] * wr[i];
          y.at2(b, o) = acc;
        }
      if (l.has_bias) {
        const DenseTensor& bias = require_param(ctx.params, l.name + ".bias");
        for (Index b = 0; b < B; ++b)
          for (Index o = 0; o < Out; ++o) y.at2(b, o) += bias[o];
      }
      if (l.adapter) {
        const AdapterAttachment& a = *l.adapter;
        if (a.kind == AdapterKind::LoRA) {
          const DenseTensor& A = require_param(ctx.params, l.name + ".adapter.a");  // (r, in)
          const DenseTensor& Bm = require_param(ctx.params, l.name + ".adapter.b");  // (out, r)
          DenseTensor mid = matmul(x, transpose(A));  // (B, r)
          DenseTensor up = matmul(mid, transpose(Bm));
          for (Index i = 0; i < y.size(); ++i) y[i] += a.scaling * up[i];
          if (cc) cc->adapter_mid = std::move(mid);
        } else {
          DenseTensor delta = adapter_delta(l, ctx.params, w.shape());
          DenseTensor up({B, Out});
          for (Index b = 0; b < B; ++b)
            for (Index o = 0; o < Out; ++o) {
              const double* xr = x.data() + b * In;
              const double* dr = delta.data() + o * In;
              double acc = 0;
              for (Index i = 0; i < In; ++i) acc += xr[i] * dr[i];
              up.at2(b, o) = acc;
            }
          for (Index i = 0; i < y.size(); ++i) y[i] += a.scaling * up[i];
          if (cc) cc->adapter_delta = std::move(delta);
        }
      }
      return y;
    }
    case LayerKind::FactorizedLinear: {
      const DenseTensor& u1 = require_param(ctx.params, l.name + ".u1");    // (out, r_out)
      const DenseTensor& g = require_param(ctx.params, l.name + ".core");   // (r_out, r_in)
      const DenseTensor& u2 = require_param(ctx.params, l.name + ".u2");    // (in, r_in)
      DenseTensor down = matmul(x, u2);            // (B, r_in)
      if (cc) cc->down = down;
      DenseTensor mid = matmul(down, transpose(g));  // (B, r_out)
      if (l.adapter) {
        const AdapterAttachment& a = *l.adapter;
        if (a.kind == AdapterKind::LoRA) {
          const DenseTensor& A = require_param(ctx.params, l.name + ".adapter.a");  // (r, r_in)
          const DenseTensor& Bm = require_param(ctx.params, l.name + ".adapter.b");  // (r_out, r)
          DenseTensor amid = matmul(down, transpose(A));
          DenseTensor up = matmul(amid, transpose(Bm));
          for (Index i = 0; i < mid.size(); ++i) mid[i] += a.scaling * up[i];
          if (cc) cc->adapter_mid = std::move(amid);
        } else {
          DenseTensor delta = adapter_delta(l, ctx.params, g.shape());
          DenseTensor up = matmul(down, transpose(delta));
          for (Index i = 0; i < mid.size(); ++i) mid[i] += a.scaling * up[i];
          if (cc) cc->adapter_delta = std::move(delta);
        }
      }
      if (cc) cc->core_out = mid;
      DenseTensor y = matmul(mid, transpose(u1));  // (B, out)
      if (l.has_bias) {
        const DenseTensor& bias = require_param(ctx.params, l.name + ".bias");
        for (Index b = 0; b < y.extent(0); ++b)
          for (Index o = 0; o < y.extent(1); ++o) y.at2(b, o) += bias[o];
      }
      return y;
    }
    case LayerKind::Dropout: {
      if (ctx.mode == Mode::Eval || l.rate <= 0.0 || ctx.rng == nullptr) return x;
      DenseTensor mask(x.shape());
      const double keep_scale = 1.0 / (1.0 - l.rate);
      for (Index i = 0; i < mask.size(); ++i)
        mask[i] = ctx.rng->uniform() >= l.rate ? keep_scale : 0.0;
      DenseTensor y = x;
      for (Index i = 0; i < y.size(); ++i) y[i] *= mask[i];
      if (cc) cc->dropout_mask = std::move(mask);
      return y;
    }
  }
  throw std::logic_error("unhandled layer kind");
}

DenseTensor run_stack(std::span<const LayerSpec> layers, StackCtx& ctx, const DenseTensor& x,
                      StackCache* cache) {
  DenseTensor cur = x;
  if (cache) cache->layers.assign(layers.size(), LayerCache{});
  size_t i = 0;
  for (const auto& l : layers) {
    cur = run_layer(l, cur, ctx, cache ? &cache->layers[i] : nullptr);
    if (!cur.all_finite())
      throw std::runtime_error("non-finite activation after layer " + l.name);
    ++i;
  }
  if (cache) cache->out = cur;
  return cur;
}

// Gradient of a single layer; returns d(input) and adds parameter grads.
DenseTensor layer_backward(const LayerSpec& l, const LayerCache& cc,
                           const std::map<std::string, DenseTensor>& params,
                           const DenseTensor& dy0, GradMap& grads) {
  DenseTensor dy = dy0;
  auto accumulate = [&grads](const std::string& name, DenseTensor g) {
    auto it = grads.find(name);
    if (it == grads.end())
      grads.emplace(name, std::move(g));
    else
      it->second = it->second + g;
  };

  switch (l.kind) {
    case LayerKind::Conv1d: {
      const DenseTensor& w = require_param(params, l.name + ".weight");
      DenseTensor dx, dw, dbias;
      if (l.adapter && adapter_is_materialized(*l.adapter)) {
        DenseTensor weff = w + scale(cc.adapter_delta, l.adapter->scaling);
        conv1d_raw_backward(cc.in, weff, dy, l.stride, l.padding, &dx, &dw,
                            l.has_bias ? &dbias : nullptr);
        adapter_delta_backward(l, params, scale(dw, l.adapter->scaling), grads);
      } else {
        conv1d_raw_backward(cc.in, w, dy, l.stride, l.padding, &dx, &dw,
                            l.has_bias ? &dbias : nullptr);
        if (l.adapter) {
          const DenseTensor& a = require_param(params, l.name + ".adapter.a");
          const DenseTensor& g = require_param(params, l.name + ".adapter.core");
          const DenseTensor& b = require_param(params, l.name + ".adapter.b");
          DenseTensor dup = scale(dy, l.adapter->scaling);
          DenseTensor dcore_out, db;
          channel_project_backward(cc.adapter_core_out, b, dup, &dcore_out, &db);
          DenseTensor dmid, dg;
          conv1d_raw_backward(cc.adapter_mid, g, dcore_out, l.stride, l.padding, &dmid, &dg,
                              nullptr);
          DenseTensor dxa, dat;
          channel_project_backward(cc.in, transpose(a), dmid, &dxa, &dat);
          dx = dx + dxa;
          accumulate(l.name + ".adapter.b", std::move(db));
          accumulate(l.name + ".adapter.core", std::move(dg));
          accumulate(l.name + ".adapter.a", transpose(dat));
        }
      }
      accumulate(l.name + ".weight", std::move(dw));
      if (l.has_bias) accumulate(l.name + ".bias", std::move(dbias));
      return dx;
    }
    case LayerKind::FactorizedConv1d: {
      const DenseTensor& core = require_param(params, l.name + ".core");
      const DenseTensor& v1 = require_param(params, l.name + ".v1");
      if (l.has_bias) {
        const Index B = dy.extent(0), C = dy.extent(1), L = dy.extent(2);
        DenseTensor dbias({C});
        for (Index b = 0; b < B; ++b)
          for (Index c = 0; c < C; ++c) {
            const double* row = dy.data() + (b * C + c) * L;
            double acc = 0;
            for (Index t = 0; t < L; ++t) acc += row[t];
            dbias[c] += acc;
          }
        accumulate(l.name + ".bias", std::move(dbias));
      }
      DenseTensor dzc, dv1;
      channel_project_backward(cc.core_out, v1, dy, &dzc, &dv1);
      accumulate(l.name + ".v1", std::move(dv1));

      const DenseTensor& z = l.r_in > 0 ? cc.down : cc.in;
      if (l.adapter) {
        if (adapter_is_materialized(*l.adapter)) {
          DenseTensor ddelta;
          conv1d_raw_backward(z, cc.adapter_delta, dzc, l.stride, l.padding, nullptr, &ddelta,
                              nullptr);
          adapter_delta_backward(l, params, scale(ddelta, l.adapter->scaling), grads);
          // input gradient through the adapter branch
          DenseTensor dz_extra;
          conv1d_raw_backward(z, cc.adapter_delta, scale(dzc, l.adapter->scaling), l.stride,
                              l.padding, &dz_extra, nullptr, nullptr);
          DenseTensor dz, dcore;
          conv1d_raw_backward(z, core, dzc, l.stride, l.padding, &dz, &dcore, nullptr);
          accumulate(l.name + ".core", std::move(dcore));
          dz = dz + dz_extra;
          if (l.r_in > 0) {
            const DenseTensor& v2 = require_param(params, l.name + ".v2");
            DenseTensor dx, dv2t;
            channel_project_backward(cc.in, transpose(v2), dz, &dx, &dv2t);
            accumulate(l.name + ".v2", transpose(dv2t));
            return dx;
          }
          return dz;
        }
        const DenseTensor& a = require_param(params, l.name + ".adapter.a");
        const DenseTensor& g = require_param(params, l.name + ".adapter.core");
        const DenseTensor& b = require_param(params, l.name + ".adapter.b");
        DenseTensor dup = scale(dzc, l.adapter->scaling);
        DenseTensor dcore_out, db;
        channel_project_backward(cc.adapter_core_out, b, dup, &dcore_out, &db);
        DenseTensor dmid, dg;
        conv1d_raw_backward(cc.adapter_mid, g, dcore_out, l.stride, l.padding, &dmid, &dg, nullptr);
        DenseTensor dza, dat;
        channel_project_backward(z, transpose(a), dmid, &dza, &dat);
        accumulate(l.name + ".adapter.b", std::move(db));
        accumulate(l.name + ".adapter.core", std::move(dg));
        accumulate(l.name + ".adapter.a", transpose(dat));
        DenseTensor dz, dcore;
        conv1d_raw_backward(z, core, dzc, l.stride, l.padding, &dz, &dcore, nullptr);
        accumulate(l.name + ".core", std::move(dcore));
        dz = dz + dza;
        if (l.r_in > 0) {
          const DenseTensor& v2 = require_param(params, l.name + ".v2");
          DenseTensor dx, dv2t;
          channel_project_backward(cc.in, transpose(v2), dz, &dx, &dv2t);
          accumulate(l.name + ".v2", transpose(dv2t));
          return dx;
        }
        return dz;
      }
      DenseTensor dz, dcore;
      conv1d_raw_backward(z, core, dzc, l.stride, l.padding, &dz, &dcore, nullptr);
      accumulate(l.name + ".core", std::move(dcore));
      if (l.r_in > 0) {
        const DenseTensor& v2 = require_param(params, l.name + ".v2");
        DenseTensor dx, dv2t;
        channel_project_backward(cc.in, transpose(v2), dz, &dx, &dv2t);
        accumulate(l.name + ".v2", transpose(dv2t));
        return dx;
      }
      return dz;
    }
    case LayerKind::BatchNorm1d: {
      const DenseTensor& gamma = require_param(params, l.name + ".gamma");
      const Index B = dy.extent(0), C = dy.extent(1), L = dy.extent(2);
      const Index N = B * L;
      DenseTensor dgamma({C}), dbeta({C}), dx(dy.shape());
      for (Index c = 0; c < C; ++c) {
        const double inv = 1.0 / std::sqrt(cc.batch_var[c] + kBnEps);
        double sum_dy = 0, sum_dy_xhat = 0;
        for (Index b = 0; b < B; ++b) {
          const double* dyr = dy.data() + (b * C + c) * L;
          const double* hr = cc.xhat.data() + (b * C + c) * L;
          for (Index t = 0; t < L; ++t) {
            sum_dy += dyr[t];
            sum_dy_xhat += dyr[t] * hr[t];
          }
        }
        dbeta[c] = sum_dy;
        dgamma[c] = sum_dy_xhat;
        const double gn = gamma[c] * inv / static_cast<double>(N);
        for (Index b = 0; b < B; ++b) {
          const double* dyr = dy.data() + (b * C + c) * L;
          const double* hr = cc.xhat.data() + (b * C + c) * L;
          double* dxr = dx.data() + (b * C + c) * L;
          for (Index t = 0; t < L; ++t)
            dxr[t] = gn * (static_cast<double>(N) * dyr[t] - sum_dy - hr[t] * sum_dy_xhat);
        }
      }
      accumulate(l.name + ".gamma", std::move(dgamma));
      accumulate(l.name + ".beta", std::move(dbeta));
      return dx;
    }
    case LayerKind::ReLU: {
      DenseTensor dx = dy;
      for (Index i = 0; i < dx.size(); ++i)
        if (cc.in[i] <= 0.0) dx[i] = 0.0;
      return dx;
    }
    case LayerKind::MaxPool1d: {
      const Index B = cc.in.extent(0), C = cc.in.extent(1), L = cc.in.extent(2);
      const Index Lo = dy.extent(2);
      DenseTensor dx({B, C, L});
      for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < C; ++c) {
          const double* dyr = dy.data() + (b * C + c) * Lo;
          double* dxr = dx.data() + (b * C + c) * L;
          for (Index lo = 0; lo < Lo; ++lo) {
            const Index arg = cc.argmax[static_cast<size_t>((b * C + c) * Lo + lo)];
            if (arg >= 0) dxr[arg] += dyr[lo];
          }
        }
      return dx;
    }
    case LayerKind::AdaptiveAvgPool1d: {
      const Index B = cc.in.extent(0), C = cc.in.extent(1), L = cc.in.extent(2);
      const Index Lo = dy.extent(2);
      DenseTensor dx({B, C, L});
      for (Index b = 0; b < B; ++b)
        for (Index c = 0; c < C; ++c) {
          const double* dyr = dy.data() + (b * C + c) * Lo;
          double* dxr = dx.data() + (b * C + c) * L;
          for (Index lo = 0; lo < Lo; ++lo) {
            const Index s0 = (lo * L) / Lo;
            const Index s1 = ((lo + 1) * L + Lo - 1) / Lo;
            const double share = dyr[lo] / static_cast<double>(s1 - s0);
            for (Index t = s0; t < s1; ++t) dxr[t] += share;
          }
        }
      return dx;
    }
    case LayerKind::Linear: {
      const DenseTensor& w = require_param(params, l.name + ".weight");
      const Index B = dy.extent(0), Out = dy.extent(1), In = cc.in.extent(1);
      DenseTensor dw({Out, In}), dx({B, In});
      for (Index b = 0; b < B; ++b) {
        const double* xr = cc.in.data() + b * In;
        const double* dyr = dy.data() + b * Out;
        double* dxr = dx.data() + b * In;
        for (Index o = 0; o < Out; ++o) {
          const double g = dyr[o];
          if (g == 0.0) continue;
          const double* wr = w.data() + o * In;
          double* dwr = dw.data() + o * In;
          for (Index i = 0; i < In; ++i) {
            dwr[i] += g * xr[i];
            dxr[i] += g * wr[i];
          }
        }
      }
      if (l.has_bias) {
        DenseTensor dbias({Out});
        for (Index b = 0; b < B; ++b)
          for (Index o = 0; o < Out; ++o) dbias[o] += dy.at2(b, o);
        accumulate(l.name + ".bias", std::move(dbias));
      }
      if (l.adapter) {
        const AdapterAttachment& a = *l.adapter;
        if (a.kind == AdapterKind::LoRA) {
          const DenseTensor& A = require_param(params, l.name + ".adapter.a");
          const DenseTensor& Bm = require_param(params, l.name + ".adapter.b");
          DenseTensor dup = scale(dy, a.scaling);       // (B, out)
          DenseTensor dmid = matmul(dup, Bm);            // (B, r)
          accumulate(l.name + ".adapter.b", matmul(transpose(dup), cc.adapter_mid));
          accumulate(l.name + ".adapter.a", matmul(transpose(dmid), cc.in));
          dx = dx + matmul(dmid, A);
        } else {
          DenseTensor ddelta = matmul(transpose(scale(dy, a.scaling)), cc.in);  // (out, in)
          adapter_delta_backward(l, params, ddelta, grads);
          DenseTensor dx_extra({B, In});
          for (Index b = 0; b < B; ++b)
            for (Index o = 0; o < Out; ++o) {
              const double g = a.scaling * dy.at2(b, o);
              if (g == 0.0) continue;
              const double* dr = cc.adapter_delta.data() + o * In;
              double* dxr = dx_extra.data() + b * In;
              for (Index i = 0; i < In; ++i) dxr[i] += g * dr[i];
            }
          dx = dx + dx_extra;
        }
      }
      accumulate(l.name + ".weight", std::move(dw));
      if (!cc.pre_flatten.empty()) dx = reshape(std::move(dx), cc.pre_flatten);
      return dx;
    }
    case LayerKind::FactorizedLinear: {
      const DenseTensor& u1 = require_param(params, l.name + ".u1");
      const DenseTensor& g = require_param(params, l.name + ".core");
      const DenseTensor& u2 = require_param(params, l.name + ".u2");
      if (l.has_bias) {
        const Index B = dy.extent(0), Out = dy.extent(1);
        DenseTensor dbias({Out});
        for (Index b = 0; b < B; ++b)
          for (Index o = 0; o < Out; ++o) dbias[o] += dy.at2(b, o);
        accumulate(l.name + ".bias", std::move(dbias));
      }
      DenseTensor dmid = matmul(dy, u1);  // (B, r_out)
      accumulate(l.name + ".u1", matmul(transpose(dy), cc.core_out));
      DenseTensor ddown = matmul(dmid, g);  // (B, r_in)
      if (l.adapter) {
        const AdapterAttachment& a = *l.adapter;
        if (a.kind == AdapterKind::LoRA) {
          const DenseTensor& A = require_param(params, l.name + ".adapter.a");
          const DenseTensor& Bm = require_param(params, l.name + ".adapter.b");
          DenseTensor dup = scale(dmid, a.scaling);
          DenseTensor damid = matmul(dup, Bm);
          accumulate(l.name + ".adapter.b", matmul(transpose(dup), cc.adapter_mid));
          accumulate(l.name + ".adapter.a", matmul(transpose(damid), cc.down));
          ddown = ddown + matmul(damid, A);
        } else {
          DenseTensor ddelta = matmul(transpose(scale(dmid, a.scaling)), cc.down);
          adapter_delta_backward(l, params, ddelta, grads);
          ddown = ddown + matmul(scale(dmid, a.scaling), cc.adapter_delta);
        }
      }
      accumulate(l.name + ".core", matmul(transpose(dmid), cc.down));
      accumulate(l.name + ".u2", matmul(transpose(cc.in), ddown));
      DenseTensor dx = matmul(ddown, transpose(u2));
      if (!cc.pre_flatten.empty()) dx = reshape(std::move(dx), cc.pre_flatten);
      return dx;
    }
    case LayerKind::Dropout: {
      if (cc.dropout_mask.size() == 0) return dy;
      DenseTensor dx = dy;
      for (Index i = 0; i < dx.size(); ++i) dx[i] *= cc.dropout_mask[i];
      return dx;
    }
  }
  throw std::logic_error("unhandled layer kind in backward");
}

DenseTensor stack_backward(std::span<const LayerSpec> layers, const StackCache& cache,
                           const std::map<std::string, DenseTensor>& params,
                           const DenseTensor& dout, GradMap& grads) {
  if (cache.layers.size() != layers.size())
    throw std::invalid_argument("backward: cache does not match stack");
  DenseTensor dy = dout;
  for (Index i = static_cast<Index>(layers.size()) - 1; i >= 0; --i) {
    const LayerCache& cc = cache.layers[static_cast<size_t>(i)];
    if (cc.in.size() == 0) throw std::invalid_argument("backward: missing cache entry");
    dy = layer_backward(layers[static_cast<size_t>(i)], cc, params, dy, grads);
  }
  return dy;
}

ForwardResult forward_impl(const ModelGraph& m, std::map<std::string, DenseTensor>* state_rw,
                           const DenseTensor& x, Mode mode, Rng* rng) {
  if (x.order() != 3 || x.extent(1) != m.input_channels)
    throw std::invalid_argument("forward: batch shape " + shape_to_string(x.shape()) +
                                " does not match model input (" +
                                std::to_string(m.input_channels) + " channels)");
  StackCtx ctx{m.params, &m.state, state_rw, mode, rng};
  ForwardResult fr;
  const bool want_cache = (mode == Mode::Train);
  std::span<const LayerSpec> backbone(m.layers.data(), static_cast<size_t>(m.backbone_end));
  std::span<const LayerSpec> classifier(m.layers.data() + m.backbone_end,
                                        m.layers.size() - static_cast<size_t>(m.backbone_end));
  DenseTensor feat3 = run_stack(backbone, ctx, x, want_cache ? &fr.backbone_cache : nullptr);
  fr.features = reshape(feat3, {feat3.extent(0), feat3.size() / feat3.extent(0)});
  if (want_cache) fr.backbone_cache.out = feat3;
  fr.logits =
      run_stack(classifier, ctx, fr.features, want_cache ? &fr.classifier_cache : nullptr);
  return fr;
}

}  // namespace

ForwardResult forward_train(ModelGraph& m, const DenseTensor& x, Rng& rng) {
  return forward_impl(m, &m.state, x, Mode::Train, &rng);
}

ForwardResult forward_eval(const ModelGraph& m, const DenseTensor& x) {
  return forward_impl(m, nullptr, x, Mode::Eval, nullptr);
}

GradMap backward(const ModelGraph& m, const ForwardResult& fr, const DenseTensor& dlogits,
                 const DenseTensor* dfeatures) {
  GradMap grads;
  std::span<const LayerSpec> backbone(m.layers.data(), static_cast<size_t>(m.backbone_end));
  std::span<const LayerSpec> classifier(m.layers.data() + m.backbone_end,
                                        m.layers.size() - static_cast<size_t>(m.backbone_end));
  DenseTensor dfeat = stack_backward(classifier, fr.classifier_cache, m.params, dlogits, grads);
  if (dfeatures) {
    if (!dfeat.same_shape(*dfeatures))
      throw std::invalid_argument("backward: dfeatures shape mismatch");
    dfeat = dfeat + *dfeatures;
  }
  DenseTensor dfeat3 = reshape(dfeat, fr.backbone_cache.out.shape());
  stack_backward(backbone, fr.backbone_cache, m.params, dfeat3, grads);
  return grads;
}

void backbone_backward(const ModelGraph& m, const StackCache& cache, const DenseTensor& dfeatures,
                       GradMap& grads) {
  std::span<const LayerSpec> backbone(m.layers.data(), static_cast<size_t>(m.backbone_end));
  DenseTensor dfeat3 = reshape(dfeatures, cache.out.shape());
  stack_backward(backbone, cache, m.params, dfeat3, grads);
}

DenseTensor imputer_forward(const ModelGraph& m, const DenseTensor& features, Mode mode,
                            StackCache* cache) {
  if (m.imputer.empty()) throw std::invalid_argument("model has no imputer head");
  StackCtx ctx{m.params, &m.state, nullptr, mode, nullptr};
  std::span<const LayerSpec> stack(m.imputer.data(), m.imputer.size());
  return run_stack(stack, ctx, features, cache);
}

DenseTensor imputer_backward(const ModelGraph& m, const StackCache& cache, const DenseTensor& dout,
                             GradMap& grads) {
  std::span<const LayerSpec> stack(m.imputer.data(), m.imputer.size());
  return stack_backward(stack, cache, m.params, dout, grads);
}

// ---------------------------------------------------------------------------
// Subspace mask + Adam
// ---------------------------------------------------------------------------

bool SubspaceMask::enables(ParamTag t) const {
  if (all_backbone && (t == ParamTag::Backbone || t == ParamTag::Core || t == ParamTag::Factor ||
                       t == ParamTag::Bn))
    return true;
  return enabled.count(t) > 0;
}

SubspaceMask SubspaceMask::none() { return {}; }

SubspaceMask SubspaceMask::of(std::initializer_list<ParamTag> tags) {
  SubspaceMask m;
  for (ParamTag t : tags) m.enabled.insert(t);
  return m;
}

SubspaceMask SubspaceMask::everything() {
  SubspaceMask m;
  m.all_backbone = true;
  m.enabled = {ParamTag::Backbone, ParamTag::Core,       ParamTag::Factor, ParamTag::Bn,
               ParamTag::Classifier, ParamTag::Adapter, ParamTag::Imputer};
  return m;
}

SubspaceMask SubspaceMask::parse(const std::string& name) {
  if (name == "core") return of({ParamTag::Core});
  if (name == "factors") return of({ParamTag::Factor});
  if (name == "both") return of({ParamTag::Core, ParamTag::Factor});
  if (name == "bn") return of({ParamTag::Bn});
  if (name == "adapter") return of({ParamTag::Adapter});
  if (name == "none") return none();
  if (name == "all") return everything();
  if (name == "full") {
    SubspaceMask m;
    m.all_backbone = true;
    return m;
  }
  throw std::invalid_argument("unknown subspace: " + name +
                              " (expected core|factors|both|bn|full|adapter|none|all)");
}

std::string SubspaceMask::to_string() const {
  if (all_backbone && enabled.count(ParamTag::Classifier)) return "all";
  if (all_backbone) return "full";
  std::string out;
  for (ParamTag t : enabled) out += (out.empty() ? "" : "+") + tsfda::to_string(t);
  return out.empty() ? "none" : out;
}

void adam_step(ModelGraph& m, const GradMap& grads, const SubspaceMask& mask,
               const AdamConfig& cfg, AdamState& st, StepStats* stats) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (const auto& [name, g] : grads) {
    auto pit = m.params.find(name);
    if (pit == m.params.end()) throw std::invalid_argument("adam_step: unknown parameter " + name);
    const ParamTag tag = m.tags.at(name);
    if (!mask.enables(tag)) continue;
    DenseTensor& w = pit->second;
    if (!g.same_shape(w)) throw std::invalid_argument("adam_step: gradient shape mismatch " + name);
    DenseTensor& mm = st.m.try_emplace(name, DenseTensor(w.shape())).first->second;
    DenseTensor& vv = st.v.try_emplace(name, DenseTensor(w.shape())).first->second;
    double max_step = 0, max_grad = 0;
    for (Index i = 0; i < w.size(); ++i) {
      mm[i] = cfg.beta1 * mm[i] + (1.0 - cfg.beta1) * g[i];
      vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = mm[i] / bc1;
      const double vhat = vv[i] / bc2;
      const double step = cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      w[i] -= step;
      max_step = std::max(max_step, std::abs(step));
      max_grad = std::max(max_grad, std::abs(g[i]));
    }
    if (stats) {
      stats->update_inf_over_lr[name] = max_step / cfg.lr;
      stats->grad_inf[name] = max_grad;
    }
  }
}

}  // namespace tsfda
