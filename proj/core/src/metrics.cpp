#include "medseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <numeric>

#include "medseg/data.hpp"
#include "medseg/error.hpp"

namespace medseg {

namespace {

void require_same_shape(const BinaryMask3D& a, const BinaryMask3D& b) {
  if (!(a.dims == b.dims) || a.voxels.size() != b.voxels.size())
    throw ShapeError("mask shapes differ: " + a.dims.str() + " vs " + b.dims.str());
}

struct Overlap {
  std::size_t a = 0, b = 0, both = 0;
};

Overlap overlap(const BinaryMask3D& a, const BinaryMask3D& b) {
  require_same_shape(a, b);
  Overlap o;
  for (std::size_t i = 0; i < a.voxels.size(); ++i) {
    const bool av = a.voxels[i] != 0, bv = b.voxels[i] != 0;
    o.a += av;
    o.b += bv;
    o.both += av && bv;
  }
  return o;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10f", v);
  return buf;
}

}  // namespace

double dice(const BinaryMask3D& a, const BinaryMask3D& b) {
  const Overlap o = overlap(a, b);
  if (o.a + o.b == 0) return 1.0;
  return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.a + o.b);
}

ErrorRates error_rates(const BinaryMask3D& pred, const BinaryMask3D& gt) {
  const Overlap o = overlap(pred, gt);
  if (o.b == 0) throw DataError("error rates are undefined for an empty ground truth");
  const double g = static_cast<double>(o.b);
  return {static_cast<double>(o.a - o.both) / g, static_cast<double>(o.b - o.both) / g};
}

// ---------------------------------------------------------------------------
// DiceReport

DiceReport DiceReport::from_scores(std::vector<std::pair<std::string, double>> scores) {
  DiceReport r;
  r.per_volume = std::move(scores);
  const auto n = static_cast<double>(r.per_volume.size());
  if (r.per_volume.empty()) return r;
  double sum = 0.0;
  for (const auto& [id, d] : r.per_volume) sum += d;
  r.mean = sum / n;
  if (r.per_volume.size() > 1) {
    double ss = 0.0;
    for (const auto& [id, d] : r.per_volume) ss += (d - r.mean) * (d - r.mean);
    r.std = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

std::vector<double> DiceReport::scores() const {
  std::vector<double> out;
  for (const auto& [id, d] : per_volume) out.push_back(d);
  return out;
}

std::string DiceReport::to_csv() const {
  std::string out = "subject_id,dice\n";
  for (const auto& [id, d] : per_volume) out += id + "," + fmt(d) + "\n";
  return out;
}

std::string DiceReport::summary_json() const {
  nlohmann::ordered_json j;
  j["mean"] = mean;
  j["std"] = std;
  j["n"] = per_volume.size();
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Volume inference

LabelVolume volume_predict(SegModel& model, const CtVolume& ct, int slices_per_batch) {
  ct.validate();
  const bool was_training = model.training();
  model.set_training(false);
  nn::NoGradGuard no_grad;

  const Dims3& d = ct.dims;
  LabelVolume out{d, ct.spacing, std::vector<std::uint8_t>(d.numel(), kBackground)};
  const int classes = model.config().num_classes;
  slices_per_batch = std::max(1, slices_per_batch);
  try {
    for (int z0 = 0; z0 < d.slices; z0 += slices_per_batch) {
      const int z1 = std::min(d.slices, z0 + slices_per_batch);
      std::vector<InputPatch> batch;
      for (int z = z0; z < z1; ++z) batch.push_back(make_triplet(ct, z));
      nn::Tensor probs = model.forward(make_batch(batch));
      const auto p = probs.data();
      const std::size_t plane = d.plane();
      for (int z = z0; z < z1; ++z) {
        const std::size_t base = static_cast<std::size_t>(z - z0) * classes * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const bool lung = p[base + i] > 0.5;
          const bool findings = classes > 1 && p[base + plane + i] > 0.5;
          out.labels[static_cast<std::size_t>(z) * plane + i] =
              lung ? (findings ? kFindings : kLung) : kBackground;
        }
      }
    }
  } catch (...) {
    model.set_training(was_training);
    throw;
  }
  model.set_training(was_training);
  return out;
}

// ---------------------------------------------------------------------------
// Rank-sum test

RankSumResult wilcoxon_rank_sum(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.empty() || y.empty()) throw DataError("rank-sum test needs two non-empty samples");
  const std::size_t m = x.size(), n = y.size(), total = m + n;
  for (double v : x)
    if (!std::isfinite(v)) throw DataError("rank-sum test: non-finite value");
  for (double v : y)
    if (!std::isfinite(v)) throw DataError("rank-sum test: non-finite value");

  std::vector<std::pair<double, bool>> pooled;  // (value, from x)
  for (double v : x) pooled.emplace_back(v, true);
  for (double v : y) pooled.emplace_back(v, false);
  std::sort(pooled.begin(), pooled.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  double rank_sum_x = 0.0;
  double tie_term = 0.0;  // sum over tie groups of t^3 - t
  bool ties = false;
  for (std::size_t i = 0; i < total;) {
    std::size_t j = i;
    while (j + 1 < total && pooled[j + 1].first == pooled[i].first) ++j;
    const double t = static_cast<double>(j - i + 1);
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k)
      if (pooled[k].second) rank_sum_x += midrank;
    if (t > 1) {
      ties = true;
      tie_term += t * t * t - t;
    }
    i = j + 1;
  }

  const double dm = static_cast<double>(m), dn = static_cast<double>(n);
  RankSumResult r;
  r.u = rank_sum_x - dm * (dm + 1.0) / 2.0;

  if (!ties && total <= 12) {
    // Null distribution of the rank sum: ways[k][s] counts k-subsets of
    // {1..N} with sum s.
    const std::size_t max_sum = total * (total + 1) / 2;
    std::vector<std::vector<double>> ways(m + 1, std::vector<double>(max_sum + 1, 0.0));
    ways[0][0] = 1.0;
    for (std::size_t r_ = 1; r_ <= total; ++r_)
      for (std::size_t k = std::min(m, r_); k >= 1; --k)
        for (std::size_t s = max_sum; s >= r_; --s) ways[k][s] += ways[k - 1][s - r_];
    double total_ways = 0.0, le = 0.0, ge = 0.0;
    const auto observed = static_cast<std::size_t>(std::llround(rank_sum_x));
    for (std::size_t s = 0; s <= max_sum; ++s) {
      total_ways += ways[m][s];
      if (s <= observed) le += ways[m][s];
      if (s >= observed) ge += ways[m][s];
    }
    r.exact = true;
    r.p_two_sided = std::min(1.0, 2.0 * std::min(le, ge) / total_ways);
    return r;
  }

  const double mu = dm * dn / 2.0;
  const double big_n = static_cast<double>(total);
  const double var = dm * dn / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
  if (var <= 0.0) {
    r.p_two_sided = 1.0;
    return r;
  }
  const double z = std::max(0.0, std::abs(r.u - mu) - 0.5) / std::sqrt(var);
  r.p_two_sided = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  return r;
}

double compare_runs(const DiceReport& a, const DiceReport& b) {
  auto ids = [](const DiceReport& r) {
    std::vector<std::string> out;
    for (const auto& [id, d] : r.per_volume) out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
  };
  if (ids(a) != ids(b)) throw DataError("compare_runs: reports cover different subjects");
  return wilcoxon_rank_sum(a.scores(), b.scores()).p_two_sided;
}

}  // namespace medseg
