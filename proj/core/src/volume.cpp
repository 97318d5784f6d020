#include "medseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <nlohmann/json.hpp>

#include "medseg/error.hpp"
#include "medseg/fileutil.hpp"
#include "medseg/nifti.hpp"

namespace medseg {

namespace fs = std::filesystem;

std::string Dims3::str() const {
  return std::to_string(slices) + "x" + std::to_string(height) + "x" + std::to_string(width);
}

void CtVolume::validate() const {
  if (dims.numel() == 0) throw DataError("CT volume '" + subject_id + "' is empty");
  if (hu.size() != dims.numel()) throw ShapeError("CT volume data does not match dims " + dims.str());
  if (!(spacing.dz > 0 && spacing.dy > 0 && spacing.dx > 0))
    throw DataError("CT volume '" + subject_id + "' has non-positive spacing");
  for (float v : hu)
    if (!std::isfinite(v)) throw DataError("CT volume '" + subject_id + "' has non-finite intensities");
}

void LabelVolume::validate() const {
  if (labels.size() != dims.numel()) throw ShapeError("label data does not match dims " + dims.str());
  for (auto v : labels)
    if (v > kFindings) throw DataError("label value " + std::to_string(v) + " outside {0,1,2}");
}

std::size_t BinaryMask3D::count() const {
  return static_cast<std::size_t>(std::count_if(voxels.begin(), voxels.end(), [](auto v) { return v != 0; }));
}

namespace {

BinaryMask3D threshold_labels(const LabelVolume& labels, auto predicate) {
  BinaryMask3D m{labels.dims, labels.spacing, std::vector<std::uint8_t>(labels.labels.size())};
  std::transform(labels.labels.begin(), labels.labels.end(), m.voxels.begin(),
                 [&](std::uint8_t v) { return static_cast<std::uint8_t>(predicate(v) ? 1 : 0); });
  return m;
}

}  // namespace

BinaryMask3D lung_mask(const LabelVolume& labels) {
  return threshold_labels(labels, [](std::uint8_t v) { return v >= kLung; });
}

BinaryMask3D findings_mask(const LabelVolume& labels) {
  return threshold_labels(labels, [](std::uint8_t v) { return v == kFindings; });
}

BinaryMask3D mask_from_labels(const LabelVolume& labels, std::uint8_t value) {
  return threshold_labels(labels, [value](std::uint8_t v) { return v == value; });
}

// ---------------------------------------------------------------------------
// File naming

namespace {

enum class Format { nifti, raw };

struct SplitName {
  std::string stem;
  std::string ext;  // ".nii", ".nii.gz" or ".json"
};

std::optional<SplitName> split_name(const fs::path& p) {
  const std::string name = p.filename().string();
  for (const std::string ext : {".nii.gz", ".nii", ".json"}) {
    if (name.size() > ext.size() && name.compare(name.size() - ext.size(), ext.size(), ext) == 0)
      return SplitName{name.substr(0, name.size() - ext.size()), ext};
  }
  return std::nullopt;
}

Format format_of(const fs::path& p) {
  auto s = split_name(p);
  if (!s) throw FormatError("unrecognized volume file extension: " + p.string());
  return s->ext == ".json" ? Format::raw : Format::nifti;
}

struct RawArray {
  Dims3 dims;
  Spacing spacing;
  std::string subject_id;
  std::vector<double> values;
};

fs::path raw_data_path(const fs::path& header) {
  auto p = header;
  p.replace_extension(".bin");
  return p;
}

std::string dtype_name(VoxelType t) {
  switch (t) {
    case VoxelType::uint8: return "uint8";
    case VoxelType::int16: return "int16";
    case VoxelType::int32: return "int32";
    case VoxelType::float32: return "float32";
    case VoxelType::float64: return "float64";
  }
  return "float32";
}

template <typename T>
void decode_le(const std::string& bytes, std::vector<double>& out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v;
    std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<double>(v);
  }
}

template <typename T>
std::string encode_le(const std::vector<double>& values) {
  std::string out(values.size() * sizeof(T), '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    T v = static_cast<T>(values[i]);
    std::memcpy(out.data() + i * sizeof(T), &v, sizeof(T));
  }
  return out;
}

RawArray read_raw(const fs::path& header_path) {
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(read_file(header_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed raw header " + header_path.string() + ": " + e.what());
  }
  RawArray a;
  std::string dtype;
  try {
    const auto dims = h.at("dims").get<std::vector<int>>();
    if (dims.size() != 3) throw FormatError("raw header dims must have 3 entries");
    a.dims = {dims[0], dims[1], dims[2]};
    if (h.contains("spacing")) {
      const auto sp = h.at("spacing").get<std::vector<double>>();
      if (sp.size() != 3) throw FormatError("raw header spacing must have 3 entries");
      a.spacing = {sp[0], sp[1], sp[2]};
    }
    dtype = h.value("dtype", std::string("float32"));
    a.subject_id = h.value("subject_id", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed raw header " + header_path.string() + ": " + e.what());
  }
  if (a.dims.slices < 1 || a.dims.height < 1 || a.dims.width < 1)
    throw FormatError("raw header has non-positive dims: " + header_path.string());
  const std::string bytes = read_file(raw_data_path(header_path));
  const std::size_t n = a.dims.numel();
  std::size_t width = 0;
  if (dtype == "uint8") width = 1;
  else if (dtype == "int16") width = 2;
  else if (dtype == "int32" || dtype == "float32") width = 4;
  else if (dtype == "float64") width = 8;
  else throw FormatError("unsupported raw dtype '" + dtype + "'");
  if (bytes.size() != n * width)
    throw FormatError("raw data size does not match header dims in " + raw_data_path(header_path).string());
  a.values.resize(n);
  if (dtype == "uint8") decode_le<std::uint8_t>(bytes, a.values);
  else if (dtype == "int16") decode_le<std::int16_t>(bytes, a.values);
  else if (dtype == "int32") decode_le<std::int32_t>(bytes, a.values);
  else if (dtype == "float32") decode_le<float>(bytes, a.values);
  else decode_le<double>(bytes, a.values);
  return a;
}

void write_raw(const fs::path& header_path, const Dims3& dims, const Spacing& spacing,
               const std::string& subject_id, const std::vector<double>& values, VoxelType type) {
  nlohmann::ordered_json h;
  h["dims"] = {dims.slices, dims.height, dims.width};
  h["spacing"] = {spacing.dz, spacing.dy, spacing.dx};
  h["dtype"] = dtype_name(type);
  if (!subject_id.empty()) h["subject_id"] = subject_id;
  std::string bytes;
  switch (type) {
    case VoxelType::uint8: bytes = encode_le<std::uint8_t>(values); break;
    case VoxelType::int16: bytes = encode_le<std::int16_t>(values); break;
    case VoxelType::int32: bytes = encode_le<std::int32_t>(values); break;
    case VoxelType::float32: bytes = encode_le<float>(values); break;
    case VoxelType::float64: bytes = encode_le<double>(values); break;
  }
  write_file_atomic(raw_data_path(header_path), bytes);
  write_file_atomic(header_path, h.dump(2) + "\n");
}

struct ArrayFile {
  Dims3 dims;
  Spacing spacing;
  std::string subject_id;
  std::vector<double> values;
};

ArrayFile read_array(const fs::path& p) {
  if (!fs::exists(p)) throw IoError("no such file: " + p.string());
  if (format_of(p) == Format::raw) {
    RawArray a = read_raw(p);
    return {a.dims, a.spacing, a.subject_id, std::move(a.values)};
  }
  nifti::Image img = nifti::read(p);
  return {img.dims, img.spacing, {}, std::move(img.values)};
}

void write_array(const fs::path& p, const Dims3& dims, const Spacing& spacing, const std::string& id,
                 const std::vector<double>& values, VoxelType type) {
  if (format_of(p) == Format::raw)
    write_raw(p, dims, spacing, id, values, type);
  else
    nifti::write(p, dims, spacing, values, type);
}

LabelVolume to_labels(ArrayFile a, const fs::path& p) {
  LabelVolume lv{a.dims, a.spacing, std::vector<std::uint8_t>(a.values.size())};
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double v = a.values[i];
    if (!(v >= 0 && v <= 255) || v != std::floor(v))
      throw FormatError("label file " + p.string() + " contains a non-label value");
    lv.labels[i] = static_cast<std::uint8_t>(v);
  }
  return lv;
}

}  // namespace

fs::path label_path_for(const fs::path& image) {
  auto s = split_name(image);
  if (!s) throw FormatError("unrecognized volume file extension: " + image.string());
  return image.parent_path() / (s->stem + "_label" + s->ext);
}

std::string subject_id_from_path(const fs::path& p) {
  auto s = split_name(p);
  return s ? s->stem : p.stem().string();
}

bool is_volume_file(const fs::path& p) { return split_name(p).has_value(); }

LoadedVolume load_volume(const fs::path& path) {
  ArrayFile a = read_array(path);
  LoadedVolume out;
  out.ct.subject_id = a.subject_id.empty() ? subject_id_from_path(path) : a.subject_id;
  out.ct.dims = a.dims;
  out.ct.spacing = a.spacing;
  out.ct.hu.assign(a.values.begin(), a.values.end());
  out.ct.validate();

  const fs::path lp = label_path_for(path);
  if (fs::exists(lp)) {
    LabelVolume lv = load_label_volume(lp);
    if (!(lv.dims == out.ct.dims))
      throw ShapeError("label volume " + lp.string() + " is " + lv.dims.str() + " but image is " +
                       out.ct.dims.str());
    out.labels = std::move(lv);
  }
  return out;
}

LabelVolume load_label_volume(const fs::path& path) { return to_labels(read_array(path), path); }

void save_ct(const fs::path& path, const CtVolume& ct) {
  ct.validate();
  write_array(path, ct.dims, ct.spacing, ct.subject_id, {ct.hu.begin(), ct.hu.end()}, VoxelType::float32);
}

void save_labels(const fs::path& path, const LabelVolume& labels) {
  if (labels.labels.size() != labels.dims.numel()) throw ShapeError("label data does not match dims");
  write_array(path, labels.dims, labels.spacing, {}, {labels.labels.begin(), labels.labels.end()},
              VoxelType::uint8);
}

}  // namespace medseg
