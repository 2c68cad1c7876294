#include "tsfda/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "tsfda/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tsfda {

DenseTensor TimeSeriesDataset::gather(const std::vector<Index>& idx) const {
  const Index M = channels(), L = length();
  DenseTensor out({static_cast<Index>(idx.size()), M, L});
  for (size_t b = 0; b < idx.size(); ++b) {
    const Index i = idx[b];
    if (i < 0 || i >= n()) throw std::out_of_range("dataset gather: index out of range");
    std::copy(samples.data() + i * M * L, samples.data() + (i + 1) * M * L,
              out.data() + static_cast<Index>(b) * M * L);
  }
  return out;
}

std::vector<int> TimeSeriesDataset::gather_labels(const std::vector<Index>& idx) const {
  std::vector<int> out(idx.size());
  for (size_t b = 0; b < idx.size(); ++b) out[b] = labels[static_cast<size_t>(idx[b])];
  return out;
}

void TimeSeriesDataset::validate() const {
  if (samples.order() != 3) throw std::invalid_argument("dataset samples must be (N, M, L)");
  if (n() < 1) throw std::invalid_argument("dataset is empty");
  if (static_cast<Index>(labels.size()) != n())
    throw std::invalid_argument("dataset labels do not match sample count");
  for (int y : labels)
    if (y < 0 || y >= num_classes)
      throw std::invalid_argument("dataset label " + std::to_string(y) + " out of range for " +
                                  std::to_string(num_classes) + " classes");
}

std::string to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::Negate: return "negate";
    case ShiftKind::Scale: return "scale";
    case ShiftKind::TimeWarp: return "time-warp";
    case ShiftKind::ChannelPermute: return "channel-permute";
    case ShiftKind::AdditiveDrift: return "additive-drift";
  }
  return "?";
}

ShiftKind shift_kind_from_string(const std::string& s) {
  for (ShiftKind k : {ShiftKind::Negate, ShiftKind::Scale, ShiftKind::TimeWarp,
                      ShiftKind::ChannelPermute, ShiftKind::AdditiveDrift})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown shift kind: " + s);
}

DenseTensor apply_shift(const DenseTensor& samples, const ShiftSpec& spec) {
  if (samples.order() != 3) throw std::invalid_argument("apply_shift expects (N, M, L)");
  const Index N = samples.extent(0), M = samples.extent(1), L = samples.extent(2);
  DenseTensor out = samples;
  const double mag = spec.magnitude;
  switch (spec.kind) {
    case ShiftKind::Negate: {
      const double f = 1.0 - 2.0 * mag;  // mag 1 -> exact negation, mag 0 -> identity
      for (Index i = 0; i < out.size(); ++i) out[i] *= f;
      break;
    }
    case ShiftKind::Scale: {
      const double f = 1.0 + mag;
      for (Index i = 0; i < out.size(); ++i) out[i] *= f;
      break;
    }
    case ShiftKind::TimeWarp: {
      // Smooth monotone warp w(t) = t + mag*(L/2pi)*sin(2pi t/L), sampled by
      // linear interpolation. mag < 1 keeps the warp monotone.
      for (Index s = 0; s < N; ++s)
        for (Index c = 0; c < M; ++c) {
          const double* src = samples.data() + (s * M + c) * L;
          double* dst = out.data() + (s * M + c) * L;
          for (Index t = 0; t < L; ++t) {
            const double w = t + mag * (static_cast<double>(L) / (2.0 * M_PI)) *
                                     std::sin(2.0 * M_PI * t / static_cast<double>(L));
            const double clamped = std::min(std::max(w, 0.0), static_cast<double>(L - 1));
            const Index lo = static_cast<Index>(std::floor(clamped));
            const Index hi = std::min(lo + 1, L - 1);
            const double frac = clamped - static_cast<double>(lo);
            dst[t] = (1.0 - frac) * src[lo] + frac * src[hi];
          }
        }
      break;
    }
    case ShiftKind::ChannelPermute: {
      const Index rot = static_cast<Index>(std::llround(mag * static_cast<double>(M - 1)));
      if (rot % M == 0) break;
      for (Index s = 0; s < N; ++s)
        for (Index c = 0; c < M; ++c) {
          const Index src_c = (c + rot) % M;
          std::copy(samples.data() + (s * M + src_c) * L, samples.data() + (s * M + src_c + 1) * L,
                    out.data() + (s * M + c) * L);
        }
      break;
    }
    case ShiftKind::AdditiveDrift: {
      for (Index s = 0; s < N; ++s)
        for (Index c = 0; c < M; ++c) {
          double* dst = out.data() + (s * M + c) * L;
          for (Index t = 0; t < L; ++t)
            dst[t] += mag * (2.0 * static_cast<double>(t) / static_cast<double>(L - 1) - 1.0);
        }
      break;
    }
  }
  return out;
}

namespace {

// Class template: sinusoid with a class-specific frequency/phase plus a
// localized positive bump; deliberately asymmetric under negation.
// Each class pairs a sinusoid frequency with a localized positive bump. With
// freq_groups > 0, classes share frequencies in groups and differ within a
// group only by the bump position; the sinusoid part is robust to sign flips
// while the bump is not.
double class_template(int cls, int classes, Index channel, Index t, Index len, double bump_amp,
                      double sine_amp, Index freq_groups) {
  const double x = static_cast<double>(t) / static_cast<double>(len);
  const int freq_idx = freq_groups > 0 ? cls % static_cast<int>(freq_groups) : cls;
  const int pos_idx = freq_groups > 0 ? cls / static_cast<int>(freq_groups) : cls;
  const int pos_count =
      freq_groups > 0 ? (classes + static_cast<int>(freq_groups) - 1) / static_cast<int>(freq_groups)
                      : classes;
  const double freq = 2.0 + 1.5 * static_cast<double>(freq_idx);
  const double phase = 0.9 * static_cast<double>(freq_idx) + 0.4 * static_cast<double>(channel);
  const double center = (static_cast<double>(pos_idx) + 0.5) / static_cast<double>(pos_count);
  const double width = 0.05 + 0.01 * static_cast<double>(pos_idx);
  const double d = (x - center) / width;
  return sine_amp * std::sin(2.0 * M_PI * freq * x + phase) + bump_amp * std::exp(-0.5 * d * d);
}

// Template table (classes x channels x length), built once per dataset draw.
DenseTensor build_templates(const SynthSpec& spec) {
  DenseTensor tmpl({static_cast<Index>(spec.classes), spec.channels, spec.length});
  if (spec.style == TemplateStyle::Bumps) {
    for (int cls = 0; cls < spec.classes; ++cls)
      for (Index c = 0; c < spec.channels; ++c)
        for (Index t = 0; t < spec.length; ++t)
          tmpl.at3(cls, c, t) = class_template(cls, spec.classes, c, t, spec.length,
                                               spec.bump_amp, spec.sine_amp, spec.freq_groups);
    return tmpl;
  }
  // RandomCurves: each class/channel is a smooth random trigonometric curve.
  for (int cls = 0; cls < spec.classes; ++cls)
    for (Index c = 0; c < spec.channels; ++c) {
      Rng crng(mix_seed(spec.template_seed, "curve" + std::to_string(cls) + "_" +
                                              std::to_string(c)));
      const int harmonics = 4;
      std::vector<double> freq(harmonics), phase(harmonics), amp(harmonics);
      for (int j = 0; j < harmonics; ++j) {
        freq[static_cast<size_t>(j)] = crng.uniform(1.0, 6.0);
        phase[static_cast<size_t>(j)] = crng.uniform(0.0, 2.0 * M_PI);
        amp[static_cast<size_t>(j)] = crng.uniform(0.5, 1.0) / (1.0 + j);
      }
      for (Index t = 0; t < spec.length; ++t) {
        const double x = static_cast<double>(t) / static_cast<double>(spec.length);
        double v = 0;
        for (int j = 0; j < harmonics; ++j)
          v += amp[static_cast<size_t>(j)] *
               std::sin(2.0 * M_PI * freq[static_cast<size_t>(j)] * x +
                        phase[static_cast<size_t>(j)]);
        tmpl.at3(cls, c, t) = v;
      }
    }
  return tmpl;
}

TimeSeriesDataset draw_dataset(const SynthSpec& spec, int per_class, Rng& rng,
                               const std::string& domain) {
  const Index N = static_cast<Index>(spec.classes) * per_class;
  TimeSeriesDataset ds;
  ds.samples = DenseTensor({N, spec.channels, spec.length});
  ds.labels.resize(static_cast<size_t>(N));
  ds.num_classes = spec.classes;
  ds.domain = domain;
  const DenseTensor tmpl = build_templates(spec);
  Index i = 0;
  for (int cls = 0; cls < spec.classes; ++cls) {
    for (int s = 0; s < per_class; ++s, ++i) {
      ds.labels[static_cast<size_t>(i)] = cls;
      const double amp = 1.0 + spec.amp_jitter * rng.uniform(-1.0, 1.0);
      const Index shift =
          spec.time_jitter > 0 ? rng.below(2 * spec.time_jitter + 1) - spec.time_jitter : 0;
      for (Index c = 0; c < spec.channels; ++c) {
        double* row = ds.samples.data() + (i * spec.channels + c) * spec.length;
        for (Index t = 0; t < spec.length; ++t) {
          const Index src = ((t - shift) % spec.length + spec.length) % spec.length;
          row[t] = amp * tmpl.at3(cls, c, src) + spec.noise * rng.normal();
        }
      }
    }
  }
  return ds;
}

}  // namespace

DomainPair make_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2 || spec.channels < 1 || spec.length < 8 || spec.train_per_class < 1 ||
      spec.eval_per_class < 1)
    throw std::invalid_argument("make_synthetic: invalid task spec");
  DomainPair pair;
  {
    Rng rng(mix_seed(seed, "source_train"));
    pair.source_train = draw_dataset(spec, spec.train_per_class, rng, "source");
  }
  {
    Rng rng(mix_seed(seed, "source_eval"));
    pair.source_eval = draw_dataset(spec, spec.eval_per_class, rng, "source");
  }
  {
    Rng rng(mix_seed(seed, "target_adapt"));
    pair.target_adapt = draw_dataset(spec, spec.train_per_class, rng, "target");
    pair.target_adapt.samples = apply_shift(pair.target_adapt.samples, spec.shift);
  }
  {
    Rng rng(mix_seed(seed, "target_eval"));
    pair.target_eval = draw_dataset(spec, spec.eval_per_class, rng, "target");
    pair.target_eval.samples = apply_shift(pair.target_eval.samples, spec.shift);
  }
  return pair;
}

TimeSeriesDataset stratified_subsample(const TimeSeriesDataset& ds, double ratio,
                                       std::uint64_t seed) {
  ds.validate();
  if (ratio <= 0.0 || ratio > 1.0)
    throw std::invalid_argument("stratified_subsample: ratio must be in (0, 1]");
  std::vector<std::vector<Index>> per_class(static_cast<size_t>(ds.num_classes));
  for (Index i = 0; i < ds.n(); ++i)
    per_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);

  std::vector<Index> chosen;
  for (int cls = 0; cls < ds.num_classes; ++cls) {
    auto& idx = per_class[static_cast<size_t>(cls)];
    if (idx.empty()) continue;
    const auto count = static_cast<double>(idx.size());
    Index take = static_cast<Index>(std::floor(ratio * count + 0.5));  // round half up
    take = std::max<Index>(1, std::min<Index>(take, static_cast<Index>(idx.size())));
    Rng rng(mix_seed(seed, "stratum" + std::to_string(cls)));
    rng.shuffle(idx);
    chosen.insert(chosen.end(), idx.begin(), idx.begin() + take);
  }
  std::sort(chosen.begin(), chosen.end());  // keep original sample order

  TimeSeriesDataset out;
  out.samples = ds.gather(chosen);
  out.labels = ds.gather_labels(chosen);
  out.num_classes = ds.num_classes;
  out.domain = ds.domain;
  return out;
}

double macro_f1(const std::vector<int>& truth, const std::vector<int>& pred, int num_classes) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("macro_f1: length mismatch");
  std::vector<Index> tp(static_cast<size_t>(num_classes), 0);
  std::vector<Index> fp(static_cast<size_t>(num_classes), 0);
  std::vector<Index> fn(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < truth.size(); ++i) {
    const int y = truth[i], p = pred[i];
    if (y < 0 || y >= num_classes || p < 0 || p >= num_classes)
      throw std::invalid_argument("macro_f1: label out of range");
    if (y == p)
      ++tp[static_cast<size_t>(y)];
    else {
      ++fn[static_cast<size_t>(y)];
      ++fp[static_cast<size_t>(p)];
    }
  }
  double sum = 0;
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    const size_t k = static_cast<size_t>(c);
    if (tp[k] + fp[k] + fn[k] == 0) continue;  // class absent everywhere: skip
    const double denom = static_cast<double>(2 * tp[k] + fp[k] + fn[k]);
    sum += denom > 0 ? 2.0 * static_cast<double>(tp[k]) / denom : 0.0;
    ++counted;
  }
  return counted > 0 ? sum / counted : 0.0;
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

void save_dataset_csv(const TimeSeriesDataset& ds, const std::string& csv_path,
                      const std::string& sidecar_path) {
  ds.validate();
  std::ofstream f(csv_path);
  if (!f) throw std::runtime_error("cannot write " + csv_path);
  f << "label";
  for (Index c = 0; c < ds.channels(); ++c)
    for (Index t = 0; t < ds.length(); ++t) f << ",ch" << c << "_t" << t;
  f << "\n";
  f.precision(17);
  for (Index i = 0; i < ds.n(); ++i) {
    f << ds.labels[static_cast<size_t>(i)];
    const double* row = ds.samples.data() + i * ds.channels() * ds.length();
    for (Index j = 0; j < ds.channels() * ds.length(); ++j) f << "," << row[j];
    f << "\n";
  }
  json meta{{"channels", ds.channels()},
            {"length", ds.length()},
            {"num_classes", ds.num_classes},
            {"domain", ds.domain}};
  std::ofstream sf(sidecar_path);
  if (!sf) throw std::runtime_error("cannot write " + sidecar_path);
  sf << meta.dump(2) << "\n";
}

TimeSeriesDataset load_dataset_csv(const std::string& csv_path, const std::string& sidecar_path) {
  std::ifstream sf(sidecar_path);
  if (!sf) throw std::runtime_error("cannot open " + sidecar_path);
  json meta = json::parse(sf);
  TimeSeriesDataset ds;
  const Index M = meta.at("channels").get<Index>();
  const Index L = meta.at("length").get<Index>();
  ds.num_classes = meta.at("num_classes").get<int>();
  ds.domain = meta.value("domain", "");

  std::ifstream f(csv_path);
  if (!f) throw std::runtime_error("cannot open " + csv_path);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty dataset csv: " + csv_path);
  std::vector<double> values;
  std::vector<int> labels;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string tok;
    if (!std::getline(in, tok, ',')) continue;
    labels.push_back(std::stoi(tok));
    Index got = 0;
    while (std::getline(in, tok, ',')) {
      values.push_back(std::stod(tok));
      ++got;
    }
    if (got != M * L)
      throw std::runtime_error("dataset row has " + std::to_string(got) + " values, expected " +
                               std::to_string(M * L));
  }
  const Index N = static_cast<Index>(labels.size());
  ds.samples = DenseTensor({N, M, L}, std::move(values));
  ds.labels = std::move(labels);
  ds.validate();
  return ds;
}

void save_dataset_dir(const DomainPair& pair, const std::string& dir) {
  fs::create_directories(dir);
  const auto p = [&](const std::string& name) { return (fs::path(dir) / name).string(); };
  save_dataset_csv(pair.source_train, p("source_train.csv"), p("meta.json"));
  save_dataset_csv(pair.source_eval, p("source_eval.csv"), p("meta.json"));
  save_dataset_csv(pair.target_adapt, p("target_adapt.csv"), p("meta.json"));
  save_dataset_csv(pair.target_eval, p("target_eval.csv"), p("meta.json"));
}

DomainPair load_dataset_dir(const std::string& dir) {
  const auto p = [&](const std::string& name) { return (fs::path(dir) / name).string(); };
  DomainPair pair;
  pair.source_train = load_dataset_csv(p("source_train.csv"), p("meta.json"));
  pair.source_eval = load_dataset_csv(p("source_eval.csv"), p("meta.json"));
  pair.target_adapt = load_dataset_csv(p("target_adapt.csv"), p("meta.json"));
  pair.target_eval = load_dataset_csv(p("target_eval.csv"), p("meta.json"));
  return pair;
}

std::vector<int> predict_labels(const ModelGraph& m, const DenseTensor& samples, Index batch) {
  const Index N = samples.extent(0), M = samples.extent(1), L = samples.extent(2);
  std::vector<int> out;
  out.reserve(static_cast<size_t>(N));
  for (Index start = 0; start < N; start += batch) {
    const Index stop = std::min(N, start + batch);
    DenseTensor x({stop - start, M, L});
    std::copy(samples.data() + start * M * L, samples.data() + stop * M * L, x.data());
    const auto fr = forward_eval(m, x);
    for (int p : argmax_rows(fr.logits)) out.push_back(p);
  }
  return out;
}

double evaluate_macro_f1(const ModelGraph& m, const TimeSeriesDataset& ds) {
  return macro_f1(ds.labels, predict_labels(m, ds.samples), ds.num_classes);
}

}  // namespace tsfda
