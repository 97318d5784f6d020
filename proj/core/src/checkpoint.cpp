#include "medseg/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "medseg/error.hpp"
#include "medseg/fileutil.hpp"

namespace medseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'E', 'D', 'S', 'E', 'G', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& buf) : buf_(buf) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void read_doubles(double* out, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(out, buf_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw FormatError("checkpoint is truncated");
  }
  const std::string& buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(SegModel& model, const std::filesystem::path& path) {
  std::string buf(kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kVersion);
  const std::string json = model_config_to_json(model.config());
  put<std::uint64_t>(buf, json.size());
  buf += json;
  const auto state = model.state();
  put<std::uint64_t>(buf, state.size());
  for (const auto& [name, t] : state) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    const auto& s = t->shape();
    for (int d : {s.n, s.c, s.h, s.w}) put<std::int32_t>(buf, d);
    buf.append(reinterpret_cast<const char*>(t->data().data()), t->numel() * sizeof(double));
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put<std::uint32_t>(buf, crc);
  write_file_atomic(path, buf);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const std::string buf = read_file(path);
  if (buf.size() < sizeof(kMagic) + 4 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw FormatError("not a model checkpoint: " + path.string());
  const std::size_t body = buf.size() - sizeof(std::uint32_t);
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(body)));
  if (crc != stored) throw FormatError("checkpoint checksum mismatch: " + path.string());

  Reader r(buf);
  r.bytes(sizeof(kMagic));
  if (r.get<std::uint32_t>() != kVersion) throw FormatError("unsupported checkpoint version");
  const auto json_len = r.get<std::uint64_t>();
  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(r.bytes(json_len));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.bytes(name_len);
    nn::Shape s;
    s.n = r.get<std::int32_t>();
    s.c = r.get<std::int32_t>();
    s.h = r.get<std::int32_t>();
    s.w = r.get<std::int32_t>();
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) throw FormatError("checkpoint tensor has invalid shape");
    std::vector<double> values(s.numel());
    r.read_doubles(values.data(), values.size());
    ckpt.tensors.emplace_back(std::move(name), nn::Tensor::from(s, std::move(values)));
  }
  if (r.pos() != body) throw FormatError("trailing bytes in checkpoint");
  return ckpt;
}

void restore_state(SegModel& model, const Checkpoint& ckpt) {
  std::unordered_map<std::string, const nn::Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name.emplace(name, &t);
  for (auto& entry : model.state()) {
    auto it = by_name.find(entry.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks tensor '" + entry.name + "'");
    if (!(it->second->shape() == entry.tensor->shape()))
      throw FormatError("checkpoint tensor '" + entry.name + "' has wrong shape");
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), entry.tensor->data().begin());
  }
}

std::unique_ptr<SegModel> load_model(const std::filesystem::path& path) {
  Checkpoint ckpt = read_checkpoint(path);
  auto model = std::make_unique<SegModel>(ckpt.config);
  restore_state(*model, ckpt);
  model->set_training(false);
  return model;
}

}  // namespace medseg
