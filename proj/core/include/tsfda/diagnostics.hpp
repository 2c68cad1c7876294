#pragma once

#include <map>
#include <string>
#include <vector>

#include "tsfda/nn.hpp"
#include "tsfda/sfda.hpp"
#include "tsfda/tensor.hpp"

namespace tsfda {

struct DistanceReport {
  std::vector<std::string> layers;     // parameter-bearing layers, graph order
  std::map<std::string, double> raw;   // quadrature over the layer's raw parameters
  std::map<std::string, double> recon; // reconstructed-kernel space (== raw for full layers)
  double total_raw_sq = 0;
  double total_recon_sq = 0;
};

/// Layer-wise Frobenius distances between two models of identical topology.
/// For factorized layers both the raw-parameter distance and the
/// reconstructed-kernel distance are emitted.
DistanceReport layer_distances(const ModelGraph& src, const ModelGraph& trg);

struct BoundInputs {
  double sigma = 1.0;       // prior stddev
  double n = 0;             // target sample count
  double loss_bound = 1.0;  // C
  double delta = 0.1;
  double k = 1.0, l = 1.0;
};

/// The complexity term C * sqrt(sum_dist_sq / (2 sigma^2 n) + (k ln(n/delta) + l) / n).
double pac_bound_term(double sum_sq_distances, const BoundInputs& in);

enum class AuditMode { Full, CoreOnly };

struct LemmaAuditRow {
  std::string name;     // parameter (Full) or layer (CoreOnly)
  double measured = 0;  // Frobenius distance actually realized
  double bound = 0;     // lemma bound with the run's measured constants
  double slack = 0;     // bound - measured
  bool pass = false;
};

/// Full mode checks ||W_t - W_0||_F <= eta t sqrt(MN) G per updated
/// parameter; CoreOnly checks the factored-layer bound
/// R1 R2 t eta sqrt(M N K) C_u G_k C_v on the reconstructed kernel, with all
/// constants (G, C_u, C_v) measured from the run log and the frozen factors.
std::vector<LemmaAuditRow> lemma_audit(const ModelGraph& src, const ModelGraph& trg,
                                       const RunLog& log, AuditMode mode);

/// Singular values of the mode-n unfolding of a kernel, non-increasing.
DenseTensor singular_spectrum(const DenseTensor& kernel, Index mode);

std::string distance_report_csv(const DistanceReport& rep);

}  // namespace tsfda
