#include "medseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>

#include "medseg/error.hpp"
#include "medseg/fileutil.hpp"

namespace medseg::nifti {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kVoxOffset = 352;

enum DataType : std::int16_t {
  DT_UINT8 = 2,
  DT_INT16 = 4,
  DT_INT32 = 8,
  DT_FLOAT32 = 16,
  DT_FLOAT64 = 64,
  DT_INT8 = 256,
  DT_UINT16 = 512,
  DT_UINT32 = 768,
};

int bytes_per_voxel(std::int16_t dt) {
  switch (dt) {
    case DT_UINT8:
    case DT_INT8: return 1;
    case DT_INT16:
    case DT_UINT16: return 2;
    case DT_INT32:
    case DT_UINT32:
    case DT_FLOAT32: return 4;
    case DT_FLOAT64: return 8;
    default: return 0;
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::string out;
  std::array<char, 1 << 16> chunk{};
  int n;
  while ((n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()))) > 0) out.append(chunk.data(), n);
  int err = 0;
  const char* msg = gzerror(f, &err);
  gzclose(f);
  if (n < 0 || (err != Z_OK && err != Z_STREAM_END))
    throw FormatError("corrupt compressed stream in " + path.string() + ": " + msg);
  return out;
}

template <typename T>
T load(const std::string& buf, std::size_t offset, bool swap) {
  T v;
  std::memcpy(&v, buf.data() + offset, sizeof(T));
  if (swap) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void store(std::string& buf, std::size_t offset, T v) {
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

template <typename T>
void decode(const std::string& buf, std::size_t offset, std::size_t n, bool swap,
            std::vector<double>& out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<double>(load<T>(buf, offset + i * sizeof(T), swap));
}

template <typename T>
void encode(const std::vector<double>& values, std::string& buf, std::size_t offset) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    T v = static_cast<T>(values[i]);
    std::memcpy(buf.data() + offset + i * sizeof(T), &v, sizeof(T));
  }
}

}  // namespace

Image read(const std::filesystem::path& path) {
  const std::string buf = read_maybe_gzip(path);
  if (buf.size() < kHeaderSize) throw FormatError("file too small for a NIfTI header: " + path.string());
  bool swap = false;
  std::int32_t hdr = load<std::int32_t>(buf, 0, false);
  if (hdr != kHeaderSize) {
    swap = true;
    if (load<std::int32_t>(buf, 0, true) != kHeaderSize)
      throw FormatError("not a NIfTI-1 file: " + path.string());
  }
  if (std::memcmp(buf.data() + 344, "n+1", 4) != 0)
    throw FormatError("unsupported NIfTI variant (expected single-file n+1): " + path.string());

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = load<std::int16_t>(buf, 40 + 2 * i, swap);
  if (dim[0] < 2 || dim[0] > 7) throw FormatError("invalid NIfTI dimension count");
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw FormatError("only 3D NIfTI volumes are supported: " + path.string());
  const int nx = dim[1];
  const int ny = dim[2];
  const int nz = dim[0] >= 3 ? dim[3] : 1;
  if (nx < 1 || ny < 1 || nz < 1) throw FormatError("invalid NIfTI dimensions");

  const auto datatype = load<std::int16_t>(buf, 70, swap);
  const int bpv = bytes_per_voxel(datatype);
  if (bpv == 0) throw FormatError("unsupported NIfTI datatype " + std::to_string(datatype));

  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = load<float>(buf, 76 + 4 * i, swap);
  const auto vox_offset = static_cast<std::size_t>(load<float>(buf, 108, swap));
  const float slope = load<float>(buf, 112, swap);
  const float inter = load<float>(buf, 116, swap);

  Image img;
  img.dims = {nz, ny, nx};
  auto spacing_of = [](float v) { return v > 0 ? static_cast<double>(v) : 1.0; };
  img.spacing = {spacing_of(pixdim[3]), spacing_of(pixdim[2]), spacing_of(pixdim[1])};
  const std::size_t n = img.dims.numel();
  if (vox_offset < kHeaderSize || buf.size() < vox_offset + n * bpv)
    throw FormatError("NIfTI voxel data is truncated: " + path.string());

  img.values.resize(n);
  switch (datatype) {
    case DT_UINT8: decode<std::uint8_t>(buf, vox_offset, n, swap, img.values); break;
    case DT_INT8: decode<std::int8_t>(buf, vox_offset, n, swap, img.values); break;
    case DT_INT16: decode<std::int16_t>(buf, vox_offset, n, swap, img.values); break;
    case DT_UINT16: decode<std::uint16_t>(buf, vox_offset, n, swap, img.values); break;
    case DT_INT32: decode<std::int32_t>(buf, vox_offset, n, swap, img.values); break;
    case DT_UINT32: decode<std::uint32_t>(buf, vox_offset, n, swap, img.values); break;
    case DT_FLOAT32: decode<float>(buf, vox_offset, n, swap, img.values); break;
    case DT_FLOAT64: decode<double>(buf, vox_offset, n, swap, img.values); break;
    default: break;
  }
  if (slope != 0.0f && std::isfinite(slope) && !(slope == 1.0f && inter == 0.0f))
    for (auto& v : img.values) v = v * slope + inter;
  return img;
}

void write(const std::filesystem::path& path, const Dims3& dims, const Spacing& spacing,
           const std::vector<double>& values, VoxelType type) {
  if (values.size() != dims.numel()) throw ShapeError("NIfTI write: value count does not match dims");
  if (dims.width > 32767 || dims.height > 32767 || dims.slices > 32767)
    throw ShapeError("NIfTI-1 dimensions are limited to 32767");

  std::int16_t datatype = DT_FLOAT32;
  switch (type) {
    case VoxelType::uint8: datatype = DT_UINT8; break;
    case VoxelType::int16: datatype = DT_INT16; break;
    case VoxelType::int32: datatype = DT_INT32; break;
    case VoxelType::float32: datatype = DT_FLOAT32; break;
    case VoxelType::float64: datatype = DT_FLOAT64; break;
  }
  const int bpv = bytes_per_voxel(datatype);

  std::string buf(kVoxOffset + values.size() * bpv, '\0');
  store<std::int32_t>(buf, 0, kHeaderSize);
  buf[39] = 0;  // dim_info
  const std::array<std::int16_t, 8> dim = {3, static_cast<std::int16_t>(dims.width),
                                           static_cast<std::int16_t>(dims.height),
                                           static_cast<std::int16_t>(dims.slices), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) store<std::int16_t>(buf, 40 + 2 * i, dim[i]);
  store<std::int16_t>(buf, 70, datatype);
  store<std::int16_t>(buf, 72, static_cast<std::int16_t>(bpv * 8));
  const std::array<float, 8> pixdim = {1.0f, static_cast<float>(spacing.dx), static_cast<float>(spacing.dy),
                                       static_cast<float>(spacing.dz), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) store<float>(buf, 76 + 4 * i, pixdim[i]);
  store<float>(buf, 108, static_cast<float>(kVoxOffset));
  store<float>(buf, 112, 1.0f);
  store<float>(buf, 116, 0.0f);
  buf[123] = 2;  // xyzt_units: millimetres
  // Scanner-space affine: diagonal spacing, origin at zero.
  store<std::int16_t>(buf, 254, 1);
  store<float>(buf, 280, static_cast<float>(spacing.dx));
  store<float>(buf, 296 + 4, static_cast<float>(spacing.dy));
  store<float>(buf, 312 + 8, static_cast<float>(spacing.dz));
  std::memcpy(buf.data() + 344, "n+1", 4);

  switch (type) {
    case VoxelType::uint8: encode<std::uint8_t>(values, buf, kVoxOffset); break;
    case VoxelType::int16: encode<std::int16_t>(values, buf, kVoxOffset); break;
    case VoxelType::int32: encode<std::int32_t>(values, buf, kVoxOffset); break;
    case VoxelType::float32: encode<float>(values, buf, kVoxOffset); break;
    case VoxelType::float64: encode<double>(values, buf, kVoxOffset); break;
  }

  if (!ends_with(path.string(), ".gz")) {
    write_file_atomic(path, buf);
    return;
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  gzFile f = gzopen(tmp.c_str(), "wb6");
  if (!f) throw IoError("cannot write " + tmp.string());
  std::size_t written = 0;
  while (written < buf.size()) {
    const auto chunk = static_cast<unsigned>(std::min<std::size_t>(buf.size() - written, 1u << 24));
    if (gzwrite(f, buf.data() + written, chunk) != static_cast<int>(chunk)) {
      gzclose(f);
      throw IoError("error compressing " + tmp.string());
    }
    written += chunk;
  }
  if (gzclose(f) != Z_OK) throw IoError("error closing " + tmp.string());
  std::filesystem::rename(tmp, path);
}

}  // namespace medseg::nifti
