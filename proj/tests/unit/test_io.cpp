#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "medseg/checkpoint.hpp"
#include "medseg/data.hpp"
#include "medseg/error.hpp"
#include "medseg/fileutil.hpp"
#include "medseg/metrics.hpp"
#include "medseg/nifti.hpp"
#include "test_util.hpp"

using namespace medseg;
namespace fs = std::filesystem;
using medseg::testing::micro_config;
using medseg::testing::temp_dir;

namespace {

// Independent minimal NIfTI-1 writer: int16 payload, optional byte swap and
// intensity scaling, following the NIfTI-1 header layout.
void write_reference_nifti(const fs::path& path, int nx, int ny, int nz, const std::vector<std::int16_t>& values,
                           float slope, float inter, bool big_endian) {
  std::string hdr(352, '\0');
  auto put = [&](std::size_t off, auto v) {
    unsigned char bytes[sizeof(v)];
    std::memcpy(bytes, &v, sizeof(v));
    if (big_endian) std::reverse(bytes, bytes + sizeof(v));
    std::memcpy(hdr.data() + off, bytes, sizeof(v));
  };
  put(0, std::int32_t{348});
  const std::int16_t dims[8] = {3, static_cast<std::int16_t>(nx), static_cast<std::int16_t>(ny),
                                static_cast<std::int16_t>(nz), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(40 + 2 * i, dims[i]);
  put(70, std::int16_t{4});   // DT_INT16
  put(72, std::int16_t{16});  // bitpix
  const float pix[8] = {1.0f, 0.5f, 0.75f, 3.0f, 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(76 + 4 * i, pix[i]);
  put(108, 352.0f);
  put(112, slope);
  put(116, inter);
  std::memcpy(hdr.data() + 344, "n+1\0", 4);
  std::ofstream f(path, std::ios::binary);
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  for (std::int16_t v : values) {
    unsigned char b[2];
    std::memcpy(b, &v, 2);
    if (big_endian) std::swap(b[0], b[1]);
    f.write(reinterpret_cast<const char*>(b), 2);
  }
}

CtVolume small_ct() {
  CtVolume ct;
  ct.subject_id = "case_a";
  ct.dims = {3, 4, 5};
  ct.spacing = {2.5, 0.7, 0.8};
  for (std::size_t i = 0; i < ct.dims.numel(); ++i) ct.hu.push_back(static_cast<float>(-1000.0 + 13.25 * i));
  return ct;
}

}  // namespace

TEST(Nifti, ReadsIndependentlyWrittenFiles) {
  const auto dir = temp_dir("nifti_ref");
  std::vector<std::int16_t> values;
  for (int i = 0; i < 5 * 4 * 3; ++i) values.push_back(static_cast<std::int16_t>(i * 7 - 100));
  for (bool big : {false, true}) {
    const fs::path p = dir / (big ? "be.nii" : "le.nii");
    write_reference_nifti(p, 5, 4, 3, values, 2.0f, -1024.0f, big);
    const nifti::Image img = nifti::read(p);
    EXPECT_EQ(img.dims, (Dims3{3, 4, 5}));
    EXPECT_DOUBLE_EQ(img.spacing.dx, 0.5);
    EXPECT_DOUBLE_EQ(img.spacing.dy, 0.75);
    EXPECT_DOUBLE_EQ(img.spacing.dz, 3.0);
    ASSERT_EQ(img.values.size(), values.size());
    for (std::size_t i = 0; i < values.size(); ++i) EXPECT_DOUBLE_EQ(img.values[i], 2.0 * values[i] - 1024.0);
  }
}

TEST(Nifti, RoundTripPlainAndCompressed) {
  const auto dir = temp_dir("nifti_rt");
  const CtVolume ct = small_ct();
  for (const char* name : {"a.nii", "a.nii.gz", "a.json"}) {
    save_ct(dir / name, ct);
    const LoadedVolume back = load_volume(dir / name);
    EXPECT_EQ(back.ct.dims, ct.dims) << name;
    // NIfTI stores spacing as float32.
    EXPECT_NEAR(back.ct.spacing.dx, ct.spacing.dx, 1e-6) << name;
    EXPECT_NEAR(back.ct.spacing.dy, ct.spacing.dy, 1e-6) << name;
    EXPECT_NEAR(back.ct.spacing.dz, ct.spacing.dz, 1e-6) << name;
    EXPECT_EQ(back.ct.hu, ct.hu) << name;
    EXPECT_FALSE(back.labels.has_value());
  }
  // Compressed output really is gzip.
  const std::string gz = read_file(dir / "a.nii.gz");
  ASSERT_GE(gz.size(), 2u);
  EXPECT_EQ(static_cast<unsigned char>(gz[0]), 0x1f);
  EXPECT_EQ(static_cast<unsigned char>(gz[1]), 0x8b);
}

TEST(Volume, LabelsLoadAlongsideImage) {
  const auto dir = temp_dir("labels");
  const CtVolume ct = small_ct();
  LabelVolume labels{ct.dims, ct.spacing, std::vector<std::uint8_t>(ct.dims.numel(), 0)};
  labels.labels[7] = kLung;
  labels.labels[8] = kFindings;
  save_ct(dir / "case_a.nii.gz", ct);
  save_labels(label_path_for(dir / "case_a.nii.gz"), labels);
  EXPECT_EQ(label_path_for(dir / "case_a.nii.gz").filename(), "case_a_label.nii.gz");
  const LoadedVolume lv = load_volume(dir / "case_a.nii.gz");
  ASSERT_TRUE(lv.labels.has_value());
  EXPECT_EQ(lv.labels->labels, labels.labels);
  EXPECT_EQ(lv.ct.subject_id, "case_a");

  const auto ds = load_dataset_dir(dir);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds[0].ct.subject_id, "case_a");
}

TEST(Volume, LabelShapeMismatchIsAnError) {
  const auto dir = temp_dir("mismatch");
  const CtVolume ct = small_ct();
  save_ct(dir / "x.nii", ct);
  save_labels(dir / "x_label.nii", LabelVolume{{3, 4, 4}, ct.spacing, std::vector<std::uint8_t>(48, 0)});
  EXPECT_THROW(load_volume(dir / "x.nii"), ShapeError);
}

TEST(Volume, MissingAndCorruptFiles) {
  const auto dir = temp_dir("corrupt");
  EXPECT_THROW(load_volume(dir / "nope.nii"), IoError);
  write_file_atomic(dir / "junk.nii", std::string(400, 'x'));
  EXPECT_THROW(load_volume(dir / "junk.nii"), FormatError);
  EXPECT_THROW(load_dataset_dir(dir / "absent"), IoError);
}

TEST(Volume, OutOfRangeLabelsFailValidation) {
  LabelVolume l{{1, 1, 2}, {}, {0, 3}};
  EXPECT_THROW(l.validate(), DataError);
}

TEST(Checkpoint, RoundTripIsBitwiseAndPredictionsMatch) {
  const auto dir = temp_dir("ckpt");
  auto model = build_model(micro_config(2, 8, 32));
  // Move the running statistics away from their initial values.
  std::mt19937_64 rng(3);
  model->forward(medseg::testing::random_tensor({2, 3, 32, 32}, rng, false, 200.0));
  save_checkpoint(*model, dir / "m.ckpt");
  auto loaded = load_model(dir / "m.ckpt");
  EXPECT_EQ(loaded->config(), model->config());
  auto a = model->state(), b = loaded->state();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    ASSERT_EQ(a[i].tensor->numel(), b[i].tensor->numel());
    EXPECT_EQ(std::memcmp(a[i].tensor->data().data(), b[i].tensor->data().data(), a[i].tensor->numel() * 8), 0);
  }
  std::mt19937_64 vrng(4);
  const auto vol = make_phantom_dataset(1, {8, 64, 64}, vrng).front();
  EXPECT_EQ(volume_predict(*model, vol.ct).labels, volume_predict(*loaded, vol.ct).labels);
}

TEST(Checkpoint, DetectsCorruptionAndTruncation) {
  const auto dir = temp_dir("ckpt_bad");
  auto model = build_model(micro_config(1, 8, 16));
  save_checkpoint(*model, dir / "m.ckpt");
  std::string bytes = read_file(dir / "m.ckpt");
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  write_file_atomic(dir / "flip.ckpt", flipped);
  EXPECT_THROW(read_checkpoint(dir / "flip.ckpt"), FormatError);
  write_file_atomic(dir / "short.ckpt", bytes.substr(0, bytes.size() - 9));
  EXPECT_THROW(read_checkpoint(dir / "short.ckpt"), FormatError);
  write_file_atomic(dir / "magic.ckpt", "NOTMAGIC" + bytes.substr(8));
  EXPECT_THROW(read_checkpoint(dir / "magic.ckpt"), FormatError);
  EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), IoError);
  EXPECT_FALSE(fs::exists(dir / "m.ckpt.tmp"));
}

TEST(Checkpoint, RejectsLayoutMismatch) {
  const auto dir = temp_dir("ckpt_layout");
  auto small = build_model(micro_config(1, 8, 16));
  save_checkpoint(*small, dir / "m.ckpt");
  auto bigger = build_model(micro_config(2, 8, 32));
  EXPECT_THROW(restore_state(*bigger, read_checkpoint(dir / "m.ckpt")), FormatError);
}
