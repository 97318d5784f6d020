#include "medseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <nlohmann/json.hpp>

#include "medseg/error.hpp"
#include "medseg/layers.hpp"

namespace medseg {

namespace fs = std::filesystem;

void VolumePair::validate() const {
  ct.validate();
  labels.validate();
  if (!(ct.dims == labels.dims))
    throw ShapeError("labels " + labels.dims.str() + " do not match image " + ct.dims.str());
}

InputPatch make_triplet(const CtVolume& ct, int index) {
  const Dims3& d = ct.dims;
  if (index < 0 || index >= d.slices) throw ShapeError("slice index out of range");
  InputPatch p{d.height, d.width, std::vector<double>(3 * d.plane())};
  const int sources[3] = {std::max(index - 1, 0), index, std::min(index + 1, d.slices - 1)};
  for (int ch = 0; ch < 3; ++ch) {
    const float* src = ct.hu.data() + static_cast<std::size_t>(sources[ch]) * d.plane();
    std::copy(src, src + d.plane(), p.intensities.begin() + ch * d.plane());
  }
  return p;
}

std::vector<std::uint8_t> SliceSample::target() const {
  const auto& l = source->labels;
  auto first = l.labels.begin() + static_cast<std::ptrdiff_t>(index * l.dims.plane());
  return {first, first + static_cast<std::ptrdiff_t>(l.dims.plane())};
}

std::vector<SliceSample> make_slice_samples(const std::shared_ptr<const VolumePair>& volume, bool swa) {
  volume->validate();
  const auto& l = volume->labels;
  std::vector<SliceSample> out;
  for (int z = 0; z < l.dims.slices; ++z) {
    auto first = l.labels.begin() + static_cast<std::ptrdiff_t>(z * l.dims.plane());
    const bool annotated =
        std::any_of(first, first + static_cast<std::ptrdiff_t>(l.dims.plane()), [](auto v) { return v >= kLung; });
    if (swa && !annotated) continue;
    out.push_back({volume, z, annotated});
  }
  return out;
}

std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t bound) {
  // Lemire's nearly divisionless method.
  unsigned __int128 m = static_cast<unsigned __int128>(rng()) * bound;
  auto low = static_cast<std::uint64_t>(m);
  if (low < bound) {
    const std::uint64_t threshold = -bound % bound;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(rng()) * bound;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

std::mt19937_64 derive_stream(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(nn::derive_seed(seed, "stream/" + std::to_string(index)));
}

PatchSample sample_patch(const SliceSample& sample, int patch_size, std::mt19937_64& rng) {
  const int h = sample.height();
  const int w = sample.width();
  if (patch_size < 1 || patch_size > h || patch_size > w)
    throw ShapeError("patch " + std::to_string(patch_size) + " does not fit slice " + std::to_string(h) + "x" +
                     std::to_string(w));
  PatchSample p;
  p.top = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(h - patch_size + 1)));
  p.left = static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(w - patch_size + 1)));
  const CtVolume& ct = sample.source->ct;
  const std::size_t pp = static_cast<std::size_t>(patch_size) * patch_size;
  p.image = {patch_size, patch_size, std::vector<double>(3 * pp)};
  const int sources[3] = {std::max(sample.index - 1, 0), sample.index,
                          std::min(sample.index + 1, ct.dims.slices - 1)};
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < patch_size; ++y)
      for (int x = 0; x < patch_size; ++x)
        p.image.intensities[ch * pp + static_cast<std::size_t>(y) * patch_size + x] =
            ct.at(sources[ch], p.top + y, p.left + x);
  p.target.resize(pp);
  const LabelVolume& l = sample.source->labels;
  for (int y = 0; y < patch_size; ++y)
    for (int x = 0; x < patch_size; ++x)
      p.target[static_cast<std::size_t>(y) * patch_size + x] = l.at(sample.index, p.top + y, p.left + x);
  return p;
}

std::vector<PatchSample> sample_patches(const std::vector<SliceSample>& samples,
                                        const std::vector<std::size_t>& indices, int patch_size,
                                        std::uint64_t seed, int workers) {
  std::vector<PatchSample> out(indices.size());
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto rng = derive_stream(seed, i);
      out[i] = sample_patch(samples.at(indices[i]), patch_size, rng);
    }
  };
  workers = std::max(1, std::min<int>(workers, static_cast<int>(indices.size())));
  if (workers == 1) {
    run(0, indices.size());
    return out;
  }
  std::vector<std::future<void>> jobs;
  const std::size_t chunk = (indices.size() + workers - 1) / workers;
  for (int wkr = 0; wkr < workers; ++wkr) {
    const std::size_t begin = wkr * chunk;
    const std::size_t end = std::min(indices.size(), begin + chunk);
    if (begin < end) jobs.push_back(std::async(std::launch::async, run, begin, end));
  }
  for (auto& j : jobs) j.get();
  return out;
}

// ---------------------------------------------------------------------------
// Splits

std::string SplitManifest::to_json() const {
  nlohmann::ordered_json j;
  j["train_ids"] = train_ids;
  j["val_ids"] = val_ids;
  j["train_fraction"] = train_fraction;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

SplitManifest SplitManifest::from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    SplitManifest m;
    m.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    m.val_ids = j.at("val_ids").get<std::vector<std::string>>();
    m.train_fraction = j.value("train_fraction", 0.8);
    m.seed = j.value("seed", std::uint64_t{0});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("split manifest: ") + e.what());
  }
}

SplitManifest split_subjects(std::vector<std::string> ids, std::uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw ConfigError("split_subjects: duplicate subject ids");
  if (ids.size() < 2) throw ConfigError("split_subjects: need at least 2 subjects");
  auto rng = derive_stream(seed, 0);
  shuffle(ids, rng);
  auto n_train = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(ids.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, ids.size() - 1);
  SplitManifest m;
  m.seed = seed;
  m.train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  m.val_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return m;
}

SplitManifest split_subjects_per_group(const std::map<std::string, std::vector<std::string>>& groups,
                                       std::uint64_t seed) {
  SplitManifest out;
  out.seed = seed;
  for (const auto& [name, ids] : groups) {
    SplitManifest part = split_subjects(ids, nn::derive_seed(seed, name));
    out.train_ids.insert(out.train_ids.end(), part.train_ids.begin(), part.train_ids.end());
    out.val_ids.insert(out.val_ids.end(), part.val_ids.begin(), part.val_ids.end());
  }
  return out;
}

std::vector<std::vector<std::string>> kfold_subjects(std::vector<std::string> ids, int k, std::uint64_t seed) {
  if (k < 2 || static_cast<std::size_t>(k) > ids.size())
    throw ConfigError("kfold_subjects: need 2 <= k <= number of subjects");
  std::sort(ids.begin(), ids.end());
  auto rng = derive_stream(seed, 0);
  shuffle(ids, rng);
  std::vector<std::vector<std::string>> folds(k);
  for (std::size_t i = 0; i < ids.size(); ++i) folds[i % k].push_back(ids[i]);
  return folds;
}

// ---------------------------------------------------------------------------
// Phantoms

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  // 53 random bits mapped onto [0, 1).
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

// Box-Muller; keeps the generator portable across standard libraries.
double gaussian(std::mt19937_64& rng) {
  double u1 = uniform(rng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

struct Ellipsoid {
  double cz, cy, cx, rz, ry, rx;
  bool contains(double z, double y, double x) const {
    const double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
    return a * a + b * b + c * c <= 1.0;
  }
};

}  // namespace

std::vector<VolumePair> make_phantom_dataset(int n_volumes, const Dims3& shape, std::mt19937_64& rng) {
  if (shape.slices < 8 || shape.height < 64 || shape.width < 64)
    throw ConfigError("phantom shape must be at least 8x64x64, got " + shape.str());
  if (n_volumes < 1) throw ConfigError("phantom dataset needs at least one volume");
  constexpr double kAir = -1000.0, kBody = 0.0, kLungHu = -800.0, kFindingHu = -100.0, kNoise = 10.0;

  std::vector<VolumePair> out;
  const double Z = shape.slices, H = shape.height, W = shape.width;
  for (int v = 0; v < n_volumes; ++v) {
    VolumePair pair;
    pair.ct.subject_id = "phantom_" + std::string(v < 10 ? "00" : v < 100 ? "0" : "") + std::to_string(v);
    pair.ct.dims = shape;
    pair.ct.spacing = {2.5, 0.7, 0.7};
    pair.ct.hu.assign(shape.numel(), 0.0f);
    pair.labels = {shape, pair.ct.spacing, std::vector<std::uint8_t>(shape.numel(), kBackground)};

    const double body_ry = H * uniform(rng, 0.40, 0.46);
    const double body_rx = W * uniform(rng, 0.42, 0.48);
    std::vector<Ellipsoid> lungs;
    for (int side = 0; side < 2; ++side) {
      const double sign = side == 0 ? -1.0 : 1.0;
      lungs.push_back({Z / 2.0 + uniform(rng, -0.5, 0.5), H / 2.0 + uniform(rng, -0.04, 0.04) * H,
                       W / 2.0 + sign * W * uniform(rng, 0.19, 0.23), Z * uniform(rng, 0.38, 0.45),
                       H * uniform(rng, 0.22, 0.28), W * uniform(rng, 0.12, 0.15)});
    }
    for (int z = 0; z < shape.slices; ++z)
      for (int y = 0; y < shape.height; ++y)
        for (int x = 0; x < shape.width; ++x) {
          const std::size_t i = shape.index(z, y, x);
          const double dy = (y + 0.5 - H / 2.0) / body_ry, dx = (x + 0.5 - W / 2.0) / body_rx;
          double hu = dy * dy + dx * dx <= 1.0 ? kBody : kAir;
          for (const auto& e : lungs)
            if (e.contains(z + 0.5, y + 0.5, x + 0.5)) {
              hu = kLungHu;
              pair.labels.labels[i] = kLung;
            }
          pair.ct.hu[i] = static_cast<float>(hu);
        }

    // Findings: blobs seeded at lung voxels, clipped to the lung.
    std::vector<std::size_t> lung_voxels;
    for (std::size_t i = 0; i < shape.numel(); ++i)
      if (pair.labels.labels[i] == kLung) lung_voxels.push_back(i);
    const int blobs = 1 + static_cast<int>(uniform_below(rng, 3));
    for (int b = 0; b < blobs && !lung_voxels.empty(); ++b) {
      const std::size_t seed_voxel = lung_voxels[uniform_below(rng, lung_voxels.size())];
      const int sz = static_cast<int>(seed_voxel / shape.plane());
      const int sy = static_cast<int>((seed_voxel % shape.plane()) / shape.width);
      const int sx = static_cast<int>(seed_voxel % shape.width);
      const Ellipsoid blob{sz + 0.5, sy + 0.5, sx + 0.5, uniform(rng, 1.5, 3.0), uniform(rng, 3.0, 6.0) * H / 64.0,
                           uniform(rng, 3.0, 6.0) * W / 64.0};
      for (int z = 0; z < shape.slices; ++z)
        for (int y = 0; y < shape.height; ++y)
          for (int x = 0; x < shape.width; ++x) {
            const std::size_t i = shape.index(z, y, x);
            if (pair.labels.labels[i] >= kLung && blob.contains(z + 0.5, y + 0.5, x + 0.5)) {
              pair.labels.labels[i] = kFindings;
              pair.ct.hu[i] = static_cast<float>(kFindingHu);
            }
          }
    }
    for (auto& hu : pair.ct.hu) hu = static_cast<float>(hu + kNoise * gaussian(rng));
    out.push_back(std::move(pair));
  }
  return out;
}

LabelVolume phantom_lobe_map(const LabelVolume& labels) {
  const Dims3& d = labels.dims;
  LabelVolume lobes{d, labels.spacing, std::vector<std::uint8_t>(d.numel(), 0)};
  // Slice extent of each lung (side 0 = image left = patient right).
  int zmin[2] = {d.slices, d.slices}, zmax[2] = {-1, -1};
  for (int z = 0; z < d.slices; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x)
        if (labels.at(z, y, x) >= kLung) {
          const int side = x < d.width / 2 ? 0 : 1;
          zmin[side] = std::min(zmin[side], z);
          zmax[side] = std::max(zmax[side], z);
        }
  for (int z = 0; z < d.slices; ++z)
    for (int y = 0; y < d.height; ++y)
      for (int x = 0; x < d.width; ++x) {
        if (labels.at(z, y, x) < kLung) continue;
        const int side = x < d.width / 2 ? 0 : 1;
        const double t = zmax[side] > zmin[side]
                             ? static_cast<double>(z - zmin[side]) / (zmax[side] - zmin[side] + 1)
                             : 0.5;
        std::uint8_t lobe;
        if (side == 1) lobe = t >= 0.5 ? 1 : 2;                      // LUL / LLL
        else lobe = t >= 2.0 / 3.0 ? 3 : (t >= 1.0 / 3.0 ? 4 : 5);  // RUL / RML / RLL
        lobes.labels[d.index(z, y, x)] = lobe;
      }
  return lobes;
}

std::vector<VolumePair> load_dataset_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("data directory not found: " + dir.string());
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto& p = entry.path();
    if (!entry.is_regular_file() || !is_volume_file(p)) continue;
    const std::string id = subject_id_from_path(p);
    if (id.size() > 6 && id.compare(id.size() - 6, 6, "_label") == 0) continue;
    images.push_back(p);
  }
  std::sort(images.begin(), images.end());
  std::vector<VolumePair> out;
  for (const auto& p : images) {
    LoadedVolume lv = load_volume(p);
    if (!lv.labels) throw DataError("no label volume next to " + p.string());
    VolumePair pair{std::move(lv.ct), std::move(*lv.labels)};
    pair.validate();
    out.push_back(std::move(pair));
  }
  if (out.empty()) throw DataError("no volumes found in " + dir.string());
  return out;
}

}  // namespace medseg
