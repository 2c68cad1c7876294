#include "tsfda/factorize.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsfda/adapters.hpp"
#include "tsfda/sfda.hpp"

using nlohmann::json;

namespace tsfda {

Index RankPolicy::rank_in(Index c_in) const {
  if (explicit_r_in > 0) return std::min(explicit_r_in, c_in);
  const Index rf = rank_factor_in > 0 ? rank_factor_in : rank_factor;
  return std::max(min_rank, c_in / rf);
}

Index RankPolicy::rank_out(Index c_out) const {
  if (explicit_r_out > 0) return std::min(explicit_r_out, c_out);
  const Index rf = rank_factor_out > 0 ? rank_factor_out : rank_factor;
  return std::max(min_rank, c_out / rf);
}

namespace {

void retag_bias(ModelGraph& out, const std::string& name) {
  auto it = out.params.find(name + ".bias");
  if (it != out.params.end()) out.tags[name + ".bias"] = ParamTag::Factor;
}

}  // namespace

ModelGraph decompose_model(const ModelGraph& m, const RankPolicy& policy,
                           const HooiOptions& hooi_opts) {
  for (const auto& [name, p] : m.params)
    if (!p.all_finite())
      throw std::invalid_argument("decompose_model: non-finite weights in " + name);

  ModelGraph out = m;
  bool seen_conv = false;
  for (Index li = 0; li < out.backbone_end; ++li) {
    LayerSpec& l = out.layers[static_cast<size_t>(li)];
    if (l.kind == LayerKind::Conv1d) {
      const bool first_conv = !seen_conv;
      seen_conv = true;
      if (l.c_out < policy.skip_min_channels) continue;

      Index r_out = policy.rank_out(l.c_out);
      Index r_in = policy.rank_in(l.c_in);
      if (auto it = policy.layer_overrides.find(l.name); it != policy.layer_overrides.end()) {
        r_in = std::min(it->second.first, l.c_in);
        r_out = std::min(it->second.second, l.c_out);
      }
      const bool one_mode = first_conv || l.c_in == 1;

      const DenseTensor& w = out.params.at(l.name + ".weight");
      HooiResult h = one_mode ? hooi(w, {r_out}, {0}, hooi_opts)
                              : hooi(w, {r_out, r_in}, {0, 1}, hooi_opts);

      l.kind = LayerKind::FactorizedConv1d;
      l.r_out = r_out;
      l.r_in = one_mode ? 0 : r_in;
      out.params.erase(l.name + ".weight");
      out.tags.erase(l.name + ".weight");
      out.params[l.name + ".core"] = std::move(h.factors.core);
      out.tags[l.name + ".core"] = ParamTag::Core;
      out.params[l.name + ".v1"] = std::move(h.factors.factors[0]);
      out.tags[l.name + ".v1"] = ParamTag::Factor;
      if (!one_mode) {
        out.params[l.name + ".v2"] = std::move(h.factors.factors[1]);
        out.tags[l.name + ".v2"] = ParamTag::Factor;
      }
      retag_bias(out, l.name);
    } else if (l.kind == LayerKind::Linear) {
      // backbone linear: 2-D Tucker W = U1 G U2^T
      const Index r1 = policy.rank_out(l.c_out);
      const Index r2 = policy.rank_in(l.c_in);
      const DenseTensor& w = out.params.at(l.name + ".weight");
      HooiResult h = hooi(w, {r1, r2}, {0, 1}, hooi_opts);
      l.kind = LayerKind::FactorizedLinear;
      l.r_out = r1;
      l.r_in = r2;
      out.params.erase(l.name + ".weight");
      out.tags.erase(l.name + ".weight");
      out.params[l.name + ".core"] = std::move(h.factors.core);
      out.tags[l.name + ".core"] = ParamTag::Core;
      out.params[l.name + ".u1"] = std::move(h.factors.factors[0]);
      out.tags[l.name + ".u1"] = ParamTag::Factor;
      out.params[l.name + ".u2"] = std::move(h.factors.factors[1]);
      out.tags[l.name + ".u2"] = ParamTag::Factor;
      retag_bias(out, l.name);
    }
  }
  out.meta["rank_factor"] = std::to_string(policy.rank_factor);
  if (policy.explicit_r_in > 0 || policy.explicit_r_out > 0)
    out.meta["explicit_ranks"] =
        std::to_string(policy.explicit_r_in) + "," + std::to_string(policy.explicit_r_out);
  out.validate();
  return out;
}

ModelGraph recovery_finetune(const ModelGraph& m, const TimeSeriesDataset& source,
                             const RecoveryOptions& opts) {
  source.validate();
  ModelGraph out = m;
  if (opts.epochs == 0) return out;
  SourceTrainConfig cfg;
  cfg.epochs = opts.epochs;
  cfg.lr = opts.lr;
  cfg.batch = opts.batch;
  cfg.label_smoothing = opts.label_smoothing;
  cfg.seed = opts.seed;
  cfg.mask = SubspaceMask::of({ParamTag::Core, ParamTag::Factor, ParamTag::Bn});
  train_source(out, source, nullptr, cfg);
  out.meta["recovered"] = "true";
  return out;
}

// ---------------------------------------------------------------------------
// Efficiency accounting
// ---------------------------------------------------------------------------

Index count_layer_params_full(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::Conv1d:
    case LayerKind::FactorizedConv1d:
      return l.c_out * l.c_in * l.kernel + (l.has_bias ? l.c_out : 0);
    case LayerKind::BatchNorm1d:
      return 2 * l.c_in;
    case LayerKind::Linear:
    case LayerKind::FactorizedLinear:
      return l.c_out * l.c_in + (l.has_bias ? l.c_out : 0);
    default:
      return 0;
  }
}

Index count_layer_params_fact(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::FactorizedConv1d: {
      const Index core = l.r_in > 0 ? l.r_out * l.r_in * l.kernel : l.r_out * l.c_in * l.kernel;
      const Index factors = l.c_out * l.r_out + (l.r_in > 0 ? l.c_in * l.r_in : 0);
      return core + factors + (l.has_bias ? l.c_out : 0);
    }
    case LayerKind::FactorizedLinear:
      return l.r_out * l.r_in + l.c_out * l.r_out + l.c_in * l.r_in + (l.has_bias ? l.c_out : 0);
    default:
      return count_layer_params_full(l);
  }
}

Index count_layer_params_finetunable(const LayerSpec& l, const SubspaceMask& mask) {
  Index n = 0;
  auto add = [&](ParamTag tag, Index count) {
    if (mask.enables(tag)) n += count;
  };
  switch (l.kind) {
    case LayerKind::Conv1d:
      add(ParamTag::Backbone, l.c_out * l.c_in * l.kernel + (l.has_bias ? l.c_out : 0));
      break;
    case LayerKind::FactorizedConv1d: {
      add(ParamTag::Core, l.r_in > 0 ? l.r_out * l.r_in * l.kernel : l.r_out * l.c_in * l.kernel);
      add(ParamTag::Factor, l.c_out * l.r_out + (l.r_in > 0 ? l.c_in * l.r_in : 0) +
                                (l.has_bias ? l.c_out : 0));
      break;
    }
    case LayerKind::BatchNorm1d:
      add(ParamTag::Bn, 2 * l.c_in);
      break;
    case LayerKind::Linear:
      add(ParamTag::Backbone, l.c_out * l.c_in + (l.has_bias ? l.c_out : 0));
      break;
    case LayerKind::FactorizedLinear:
      add(ParamTag::Core, l.r_out * l.r_in);
      add(ParamTag::Factor, l.c_out * l.r_out + l.c_in * l.r_in + (l.has_bias ? l.c_out : 0));
      break;
    default:
      break;
  }
  if (l.adapter && mask.enables(ParamTag::Adapter)) n += count_adapter_params(*l.adapter, l);
  return n;
}

Index count_layer_macs_full(const LayerSpec& l, Index in_len) {
  switch (l.kind) {
    case LayerKind::Conv1d:
    case LayerKind::FactorizedConv1d:
      return l.c_out * l.c_in * l.kernel * layer_out_len(l, in_len);
    case LayerKind::Linear:
    case LayerKind::FactorizedLinear:
      return l.c_out * l.c_in;
    default:
      return 0;  // pooling, activations, normalization: no multiply-accumulates
  }
}

Index count_layer_macs_fact(const LayerSpec& l, Index in_len) {
  switch (l.kind) {
    case LayerKind::FactorizedConv1d: {
      const Index out_len = layer_out_len(l, in_len);
      Index macs = l.c_out * l.r_out * out_len;  // up-projection
      if (l.r_in > 0) {
        macs += l.c_in * l.r_in * in_len;                 // down-projection
        macs += l.r_out * l.r_in * l.kernel * out_len;    // core convolution
      } else {
        macs += l.r_out * l.c_in * l.kernel * out_len;    // core convolution on raw channels
      }
      if (l.adapter) macs += count_adapter_macs(*l.adapter, l, in_len);
      return macs;
    }
    case LayerKind::FactorizedLinear: {
      Index macs = l.c_in * l.r_in + l.r_in * l.r_out + l.r_out * l.c_out;
      if (l.adapter) macs += count_adapter_macs(*l.adapter, l, in_len);
      return macs;
    }
    case LayerKind::Conv1d:
    case LayerKind::Linear: {
      Index macs = count_layer_macs_full(l, in_len);
      if (l.adapter) macs += count_adapter_macs(*l.adapter, l, in_len);
      return macs;
    }
    default:
      return 0;
  }
}

namespace {

void add_into(EfficiencyRow& total, const EfficiencyRow& row) {
  total.params_full += row.params_full;
  total.params_fact += row.params_fact;
  total.params_finetunable += row.params_finetunable;
  total.macs_full += row.macs_full;
  total.macs_fact += row.macs_fact;
}

}  // namespace

EfficiencyReport efficiency_report(const ModelGraph& m, const SubspaceMask& finetunable_mask) {
  EfficiencyReport rep;
  rep.input_len = m.input_len;
  rep.backbone_total.layer = "backbone_total";
  rep.model_total.layer = "model_total";

  Index len = m.input_len;
  for (Index li = 0; li < static_cast<Index>(m.layers.size()); ++li) {
    const LayerSpec& l = m.layers[static_cast<size_t>(li)];
    EfficiencyRow row;
    row.layer = l.name;
    row.kind = to_string(l.kind);
    row.params_full = count_layer_params_full(l);
    row.params_fact = count_layer_params_fact(l);
    row.params_finetunable = count_layer_params_finetunable(l, finetunable_mask);
    row.macs_full = count_layer_macs_full(l, len);
    row.macs_fact = count_layer_macs_fact(l, len);
    len = layer_out_len(l, len);
    if (l.kind == LayerKind::Linear || l.kind == LayerKind::FactorizedLinear) len = 1;
    if (row.params_full == 0 && row.macs_full == 0) continue;  // shapeless layers
    if (li < m.backbone_end) add_into(rep.backbone_total, row);
    add_into(rep.model_total, row);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

double display_units(Index count, double divisor) {
  return std::floor(static_cast<double>(count) / divisor * 100.0 + 0.5) / 100.0;
}

double reduction_pct_displayed(Index baseline, Index reduced, double divisor) {
  const double base = display_units(baseline, divisor);
  const double red = display_units(reduced, divisor);
  if (base == 0.0) return 0.0;
  return std::floor((1.0 - red / base) * 100.0 * 100.0 + 0.5) / 100.0;
}

std::string EfficiencyReport::to_csv() const {
  std::ostringstream out;
  out << "layer,kind,params_full,params_fact,params_finetunable,macs_full,macs_fact\n";
  auto emit = [&](const EfficiencyRow& r) {
    out << r.layer << "," << r.kind << "," << r.params_full << "," << r.params_fact << ","
        << r.params_finetunable << "," << r.macs_full << "," << r.macs_fact << "\n";
  };
  for (const auto& r : rows) emit(r);
  emit(backbone_total);
  emit(model_total);
  return out.str();
}

std::string EfficiencyReport::to_json() const {
  json j;
  j["input_len"] = input_len;
  json rows_json = json::array();
  for (const auto& r : rows)
    rows_json.push_back(json{{"layer", r.layer},
                             {"kind", r.kind},
                             {"params_full", r.params_full},
                             {"params_fact", r.params_fact},
                             {"params_finetunable", r.params_finetunable},
                             {"macs_full", r.macs_full},
                             {"macs_fact", r.macs_fact}});
  j["rows"] = std::move(rows_json);
  auto totals = [&](const EfficiencyRow& t) {
    return json{{"params_full", t.params_full},
                {"params_fact", t.params_fact},
                {"params_finetunable", t.params_finetunable},
                {"macs_full", t.macs_full},
                {"macs_fact", t.macs_fact},
                {"params_full_k", display_units(t.params_full, 1e3)},
                {"params_fact_k", display_units(t.params_fact, 1e3)},
                {"params_finetunable_k", display_units(t.params_finetunable, 1e3)},
                {"macs_full_m", display_units(t.macs_full, 1e6)},
                {"macs_fact_m", display_units(t.macs_fact, 1e6)},
                {"params_reduction_pct",
                 reduction_pct_displayed(t.params_full, t.params_finetunable, 1e3)},
                {"macs_reduction_pct", reduction_pct_displayed(t.macs_full, t.macs_fact, 1e6)}};
  };
  j["backbone"] = totals(backbone_total);
  j["model"] = totals(model_total);
  return j.dump(2) + "\n";
}

}  // namespace tsfda
