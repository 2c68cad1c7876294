#include "tsfda/diagnostics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tsfda {

namespace {

double quadrature(std::initializer_list<double> parts) {
  double s = 0;
  for (double p : parts) s += p * p;
  return std::sqrt(s);
}

double param_dist(const ModelGraph& a, const ModelGraph& b, const std::string& name) {
  auto ia = a.params.find(name);
  auto ib = b.params.find(name);
  if (ia == a.params.end() && ib == b.params.end()) return 0.0;
  if (ia == a.params.end() || ib == b.params.end())
    throw std::invalid_argument("layer_distances: parameter " + name + " exists in one model only");
  return frobenius_dist(ia->second, ib->second);
}

DenseTensor reconstructed_kernel(const ModelGraph& m, const LayerSpec& l) {
  if (l.kind == LayerKind::Conv1d || l.kind == LayerKind::Linear)
    return m.params.at(l.name + ".weight");
  if (l.kind == LayerKind::FactorizedConv1d) {
    TuckerFactors f;
    f.core = m.params.at(l.name + ".core");
    if (l.r_in > 0) {
      f.factors = {m.params.at(l.name + ".v1"), m.params.at(l.name + ".v2")};
      f.decomposed_modes = {0, 1};
    } else {
      f.factors = {m.params.at(l.name + ".v1")};
      f.decomposed_modes = {0};
    }
    return reconstruct(f);
  }
  if (l.kind == LayerKind::FactorizedLinear) {
    const DenseTensor& u1 = m.params.at(l.name + ".u1");
    const DenseTensor& g = m.params.at(l.name + ".core");
    const DenseTensor& u2 = m.params.at(l.name + ".u2");
    return matmul(matmul(u1, g), transpose(u2));
  }
  throw std::invalid_argument("layer " + l.name + " has no kernel");
}

}  // namespace

DistanceReport layer_distances(const ModelGraph& src, const ModelGraph& trg) {
  if (src.layers.size() != trg.layers.size())
    throw std::invalid_argument("layer_distances: topology mismatch");
  for (size_t i = 0; i < src.layers.size(); ++i)
    if (src.layers[i].kind != trg.layers[i].kind || src.layers[i].name != trg.layers[i].name)
      throw std::invalid_argument("layer_distances: topology mismatch at layer " +
                                  src.layers[i].name);
  DistanceReport rep;
  auto do_stack = [&](const std::vector<LayerSpec>& layers) {
    for (const LayerSpec& l : layers) {
      double raw = 0, recon = 0;
      switch (l.kind) {
        case LayerKind::Conv1d:
        case LayerKind::Linear: {
          const double w = param_dist(src, trg, l.name + ".weight");
          const double bias = param_dist(src, trg, l.name + ".bias");
          raw = quadrature({w, bias});
          recon = w;
          break;
        }
        case LayerKind::FactorizedConv1d: {
          const double core = param_dist(src, trg, l.name + ".core");
          const double v1 = param_dist(src, trg, l.name + ".v1");
          const double v2 = l.r_in > 0 ? param_dist(src, trg, l.name + ".v2") : 0.0;
          const double bias = param_dist(src, trg, l.name + ".bias");
          raw = quadrature({core, v1, v2, bias});
          recon = frobenius_dist(reconstructed_kernel(src, l), reconstructed_kernel(trg, l));
          break;
        }
        case LayerKind::FactorizedLinear: {
          const double core = param_dist(src, trg, l.name + ".core");
          const double u1 = param_dist(src, trg, l.name + ".u1");
          const double u2 = param_dist(src, trg, l.name + ".u2");
          const double bias = param_dist(src, trg, l.name + ".bias");
          raw = quadrature({core, u1, u2, bias});
          recon = frobenius_dist(reconstructed_kernel(src, l), reconstructed_kernel(trg, l));
          break;
        }
        case LayerKind::BatchNorm1d: {
          raw = quadrature({param_dist(src, trg, l.name + ".gamma"),
                            param_dist(src, trg, l.name + ".beta")});
          recon = raw;
          break;
        }
        default:
          continue;
      }
      rep.layers.push_back(l.name);
      rep.raw[l.name] = raw;
      rep.recon[l.name] = recon;
      rep.total_raw_sq += raw * raw;
      rep.total_recon_sq += recon * recon;
    }
  };
  do_stack(src.layers);
  do_stack(src.imputer);
  return rep;
}

double pac_bound_term(double sum_sq_distances, const BoundInputs& in) {
  if (sum_sq_distances < 0) throw std::invalid_argument("pac_bound_term: negative distances");
  if (in.sigma <= 0 || in.n <= 0 || in.loss_bound <= 0 || in.delta <= 0 || in.delta >= 1 ||
      in.k < 0 || in.l < 0)
    throw std::invalid_argument("pac_bound_term: invalid bound inputs");
  const double kl_part = sum_sq_distances / (2.0 * in.sigma * in.sigma * in.n);
  const double conf_part = (in.k * std::log(in.n / in.delta) + in.l) / in.n;
  return in.loss_bound * std::sqrt(kl_part + conf_part);
}

std::vector<LemmaAuditRow> lemma_audit(const ModelGraph& src, const ModelGraph& trg,
                                       const RunLog& log, AuditMode mode) {
  std::vector<LemmaAuditRow> rows;
  const double eta = log.lr;
  const double t = static_cast<double>(log.steps);

  auto g_eff_of = [&](const std::string& name) {
    auto it = log.g_eff.find(name);
    if (it == log.g_eff.end())
      throw std::invalid_argument("lemma_audit: run log has no gradient bound for " + name);
    return it->second;
  };
  auto max_abs = [](const DenseTensor& m) {
    double v = 0;
    for (Index i = 0; i < m.size(); ++i) v = std::max(v, std::abs(m[i]));
    return v;
  };
  const double tol = 1e-9;

  if (mode == AuditMode::Full) {
    // Lemma-1 form per updated parameter tensor.
    for (const auto& [name, g] : log.g_eff) {
      const DenseTensor& w0 = src.params.at(name);
      const DenseTensor& wt = trg.params.at(name);
      LemmaAuditRow row;
      row.name = name;
      row.measured = frobenius_dist(wt, w0);
      row.bound = eta * t * std::sqrt(static_cast<double>(w0.size())) * g;
      row.slack = row.bound - row.measured;
      row.pass = row.measured <= row.bound + tol;
      rows.push_back(row);
    }
    return rows;
  }

  // Core-only: factored-layer bound on the reconstructed kernel.
  for (const LayerSpec& l : src.layers) {
    if (l.kind != LayerKind::FactorizedConv1d && l.kind != LayerKind::FactorizedLinear) continue;
    const std::string core_name = l.name + ".core";
    if (!log.g_eff.count(core_name)) continue;  // core untouched by this run
    const double gk = g_eff_of(core_name);

    LemmaAuditRow row;
    row.name = l.name;
    const DenseTensor src_kernel = reconstructed_kernel(src, l);
    const DenseTensor trg_kernel = reconstructed_kernel(trg, l);
    row.measured = frobenius_dist(trg_kernel, src_kernel);

    if (l.kind == LayerKind::FactorizedConv1d) {
      const double cu = max_abs(src.params.at(l.name + ".v1"));
      const double mn = static_cast<double>(l.c_out * l.c_in * l.kernel);
      if (l.r_in > 0) {
        const double cv = max_abs(src.params.at(l.name + ".v2"));
        row.bound = static_cast<double>(l.r_out * l.r_in) * t * eta * std::sqrt(mn) * cu * gk * cv;
      } else {
        row.bound = static_cast<double>(l.r_out) * t * eta * std::sqrt(mn) * cu * gk;
      }
    } else {
      const double cu = max_abs(src.params.at(l.name + ".u1"));
      const double cv = max_abs(src.params.at(l.name + ".u2"));
      const double mn = static_cast<double>(l.c_out * l.c_in);
      row.bound = static_cast<double>(l.r_out * l.r_in) * t * eta * std::sqrt(mn) * cu * gk * cv;
    }
    row.slack = row.bound - row.measured;
    row.pass = row.measured <= row.bound + tol;
    rows.push_back(row);
  }
  return rows;
}

DenseTensor singular_spectrum(const DenseTensor& kernel, Index mode) {
  const DenseTensor m = unfold(kernel, mode);
  const Index r = std::min(m.extent(0), m.extent(1));
  return truncated_svd(m, r).s;
}

std::string distance_report_csv(const DistanceReport& rep) {
  std::ostringstream out;
  out << "layer,dist_raw,dist_recon\n";
  out.precision(12);
  for (const auto& name : rep.layers)
    out << name << "," << rep.raw.at(name) << "," << rep.recon.at(name) << "\n";
  return out.str();
}

}  // namespace tsfda
