#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "didi/diffusion.hpp"
#include "didi/envs.hpp"

namespace didi {
namespace {

namespace fs = std::filesystem;

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("didi-dataio-" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

OfflineDataset small_dataset(int episodes = 3, std::uint64_t seed = 1) {
  PushEnvConfig c;
  Rng rng(seed);
  const std::vector<BehaviorScript> scripts{{{Vec2(0.6, 0.6)}, 0.05, 0, ScriptKind::reach},
                                            {{Vec2(-0.6, 0.6)}, 0.05, 1, ScriptKind::reach}};
  return generate_mixture_dataset(c, scripts, episodes, 8, rng);
}

void flip_byte(const std::string& path, long offset_from_end) {
  std::string b = read_file_bytes(path);
  b[b.size() - static_cast<std::size_t>(offset_from_end)] ^= 0x5A;
  std::ofstream(path, std::ios::binary | std::ios::trunc).write(b.data(), static_cast<std::streamsize>(b.size()));
}

template <class F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorKind::contract;
}

// --- datasets ---------------------------------------------------------------

using DatasetFile = TempDir;

TEST_F(DatasetFile, RoundTripIsExact) {
  const OfflineDataset ds = small_dataset();
  save_dataset(ds, path("d.didiset"));
  const OfflineDataset back = load_dataset(path("d.didiset"));
  EXPECT_EQ(back.layout, ds.layout);
  EXPECT_EQ(back.segments, ds.segments);
  EXPECT_EQ(back.start_times, ds.start_times);
  EXPECT_EQ(back.stats.mean, ds.stats.mean);
  EXPECT_EQ(back.stats.std, ds.stats.std);
  EXPECT_EQ(back.stats.digest(), ds.stats.digest());
  save_dataset(back, path("again.didiset"));
  EXPECT_EQ(read_file_bytes(path("d.didiset")), read_file_bytes(path("again.didiset")));
}

TEST_F(DatasetFile, ProvenanceLivesOnlyInSidecar) {
  const OfflineDataset ds = small_dataset();
  save_dataset(ds, path("d.didiset"));
  EXPECT_FALSE(load_dataset(path("d.didiset")).provenance.has_value());
  EXPECT_EQ(load_provenance(path("d.didiset")), *ds.provenance);
  const std::string header = read_file_bytes(path("d.didiset")).substr(0, 400);
  EXPECT_EQ(header.find("script"), std::string::npos);
}

TEST_F(DatasetFile, CorruptedTrailingBytesFailChecksum) {
  save_dataset(small_dataset(), path("d.didiset"));
  flip_byte(path("d.didiset"), 12);
  EXPECT_EQ(kind_of([&] { load_dataset(path("d.didiset")); }), ErrorKind::checksum_failure);
}

TEST_F(DatasetFile, CorruptedPayloadFailsChecksum) {
  save_dataset(small_dataset(), path("d.didiset"));
  flip_byte(path("d.didiset"), 200);
  EXPECT_EQ(kind_of([&] { load_dataset(path("d.didiset")); }), ErrorKind::checksum_failure);
}

TEST_F(DatasetFile, TruncationIsDetected) {
  save_dataset(small_dataset(), path("d.didiset"));
  std::string b = read_file_bytes(path("d.didiset"));
  b.resize(b.size() - 100);
  std::ofstream(path("d.didiset"), std::ios::binary | std::ios::trunc).write(b.data(), static_cast<std::streamsize>(b.size()));
  EXPECT_EQ(kind_of([&] { load_dataset(path("d.didiset")); }), ErrorKind::truncated_file);
}

TEST_F(DatasetFile, TruncatedHeaderIsDetected) {
  std::ofstream(path("d.didiset"), std::ios::binary) << "DIDI-DATASET\nversion=1\nhorizon=8\n";
  EXPECT_EQ(kind_of([&] { load_dataset(path("d.didiset")); }), ErrorKind::truncated_file);
}

TEST_F(DatasetFile, VersionMismatchIsDetected) {
  save_dataset(small_dataset(), path("d.didiset"));
  std::string b = read_file_bytes(path("d.didiset"));
  b.replace(b.find("version=1"), 9, "version=7");
  std::ofstream(path("d.didiset"), std::ios::binary | std::ios::trunc).write(b.data(), static_cast<std::streamsize>(b.size()));
  EXPECT_EQ(kind_of([&] { load_dataset(path("d.didiset")); }), ErrorKind::version_mismatch);
}

TEST_F(DatasetFile, MissingFileIsMissingArtifact) {
  EXPECT_EQ(kind_of([&] { load_dataset(path("absent.didiset")); }), ErrorKind::missing_artifact);
}

TEST_F(DatasetFile, AtomicWriteLeavesNoTempFiles) {
  save_dataset(small_dataset(), path("d.didiset"));
  for (const auto& e : fs::directory_iterator(dir_))
    EXPECT_EQ(e.path().filename().string().find(".tmp-"), std::string::npos);
}

TEST_F(DatasetFile, TenThousandSegmentRoundTripUnderTwoSeconds) {
  OfflineDataset ds;
  ds.layout = {8, 4, 2};
  Rng rng(3);
  ds.segments = standard_normal(ds.layout.dim(), 10000, rng);
  ds.start_times.assign(10000, 0);
  ds.stats = compute_stats(ds.segments, ds.layout);
  const auto t0 = std::chrono::steady_clock::now();
  save_dataset(ds, path("big.didiset"));
  const OfflineDataset back = load_dataset(path("big.didiset"));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(back.segments, ds.segments);
  EXPECT_LT(secs, 2.0);
  RecordProperty("round_trip_seconds", std::to_string(secs));
}

TEST_F(DatasetFile, SegmentCsvHasOneRowPerStep) {
  const OfflineDataset ds = small_dataset(1);
  export_segments_csv(ds, path("s.csv"));
  std::ifstream in(path("s.csv"));
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "segment,start,step,s0,s1,s2,s3,a0,a1");
  long rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, ds.size() * ds.layout.horizon);
}

// --- normalization ----------------------------------------------------------

TEST(Normalization, RoundTripToRounding) {
  const OfflineDataset ds = small_dataset();
  const Mat back = denormalize(ds.normalized(), ds.stats, ds.layout);
  EXPECT_LT((back - ds.segments).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalization, NormalizedMomentsAreStandard) {
  const OfflineDataset ds = small_dataset(5);
  const Mat n = ds.normalized();
  // Moments recomputed with plain loops.
  for (Index i = 0; i < n.rows(); ++i) {
    if (std::find(ds.stats.flagged.begin(), ds.stats.flagged.end(), static_cast<int>(i)) != ds.stats.flagged.end())
      continue;
    long double s = 0, s2 = 0;
    for (Index j = 0; j < n.cols(); ++j) s += n(i, j);
    const long double mean = s / n.cols();
    for (Index j = 0; j < n.cols(); ++j) s2 += (n(i, j) - mean) * (n(i, j) - mean);
    EXPECT_LT(std::abs(static_cast<double>(mean)), 1e-10) << "coordinate " << i;
    EXPECT_NEAR(static_cast<double>(std::sqrt(s2 / n.cols())), 1.0, 1e-10);
  }
}

TEST(Normalization, ConstantCoordinateIsFlaggedAndMapsToZero) {
  const SegmentLayout l{2, 1, 1};
  Mat raw(4, 3);
  raw << 1, 2, 3,  //
      5, 5, 5,     //
      0, 1, 0,     //
      2, 4, 6;
  const NormStats s = compute_stats(raw, l);
  EXPECT_EQ(s.flagged, std::vector<int>{1});
  EXPECT_EQ(s.std[1], kMinStd);
  EXPECT_TRUE(normalize(raw, s, l).row(1).isZero(0.0));
  EXPECT_TRUE(s.std.minCoeff() > 0);
}

TEST(Normalization, PerStepModeBroadcasts) {
  const SegmentLayout l{3, 1, 1};
  Rng rng(2);
  const Mat raw = standard_normal(6, 50, rng);
  const NormStats s = compute_stats(raw, l, NormMode::per_step);
  ASSERT_EQ(s.mean.size(), 2);
  double m0 = 0;
  for (int t = 0; t < 3; ++t) m0 += raw.row(2 * t).sum();
  EXPECT_NEAR(s.mean[0], m0 / 150.0, 1e-14);
  EXPECT_LT((denormalize(normalize(raw, s, l), s, l) - raw).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Normalization, MissingStatsIsContractViolation) {
  EXPECT_EQ(kind_of([] { normalize(Mat::Zero(4, 1), NormStats{}, SegmentLayout{2, 1, 1}); }), ErrorKind::contract);
}

TEST(Normalization, DigestTracksStatistics) {
  const OfflineDataset a = small_dataset(3, 1);
  const OfflineDataset b = small_dataset(3, 2);
  EXPECT_EQ(a.stats.digest(), small_dataset(3, 1).stats.digest());
  EXPECT_NE(a.stats.digest(), b.stats.digest());
}

// --- checkpoints ------------------------------------------------------------

using CheckpointFile = TempDir;

PriorTrainer tiny_prior(const OfflineDataset& ds) {
  PriorTrainConfig cfg;
  cfg.hidden = {16};
  cfg.batch = 8;
  cfg.seed = 5;
  return PriorTrainer(ds.normalized(), ds.layout, make_schedule(8, 1e-3, 0.2), cfg);
}

TEST_F(CheckpointFile, LoadThenSaveIsByteIdentical) {
  const OfflineDataset ds = small_dataset();
  PriorTrainer tr = tiny_prior(ds);
  tr.run(3);
  Checkpoint c = tr.checkpoint();
  c.config_digest = "abc";
  c.meta["note"] = "x=y";
  save_checkpoint(c, path("a.didickpt"));
  save_checkpoint(load_checkpoint(path("a.didickpt")), path("b.didickpt"));
  EXPECT_EQ(read_file_bytes(path("a.didickpt")), read_file_bytes(path("b.didickpt")));
  const Checkpoint back = load_checkpoint(path("a.didickpt"));
  EXPECT_EQ(back.meta.at("note"), "x=y");
  EXPECT_EQ(*back.schedule, *c.schedule);
}

TEST_F(CheckpointFile, ResumeMatchesUninterruptedTraining) {
  const OfflineDataset ds = small_dataset();
  PriorTrainer straight = tiny_prior(ds);
  straight.run(20);

  PriorTrainer first = tiny_prior(ds);
  first.run(10);
  save_checkpoint(first.checkpoint(), path("mid.didickpt"));
  PriorTrainer resumed = tiny_prior(ds);
  resumed.restore(load_checkpoint(path("mid.didickpt")));
  resumed.run(10);

  EXPECT_EQ(resumed.steps_done(), 20);
  EXPECT_EQ(std::memcmp(resumed.store().data(), straight.store().data(), sizeof(double) * straight.store().size()), 0);
  EXPECT_EQ(resumed.store().first_moment(), straight.store().first_moment());
  save_checkpoint(straight.checkpoint(), path("s.didickpt"));
  save_checkpoint(resumed.checkpoint(), path("r.didickpt"));
  EXPECT_EQ(read_file_bytes(path("s.didickpt")), read_file_bytes(path("r.didickpt")));
}

TEST_F(CheckpointFile, ArchitectureMismatchIsRejected) {
  const OfflineDataset ds = small_dataset();
  PriorTrainer tr = tiny_prior(ds);
  save_checkpoint(tr.checkpoint(), path("a.didickpt"));
  ParamStore other;
  EpsModel::create(other, ds.layout, {32});
  EXPECT_EQ(kind_of([&] { restore_into(load_checkpoint(path("a.didickpt")), other); }),
            ErrorKind::architecture_mismatch);
}

TEST_F(CheckpointFile, CorruptionAndTruncationAreDistinct) {
  const OfflineDataset ds = small_dataset();
  save_checkpoint(tiny_prior(ds).checkpoint(), path("a.didickpt"));
  const std::string good = read_file_bytes(path("a.didickpt"));
  flip_byte(path("a.didickpt"), 30);
  EXPECT_EQ(kind_of([&] { load_checkpoint(path("a.didickpt")); }), ErrorKind::checksum_failure);
  std::ofstream(path("b.didickpt"), std::ios::binary).write(good.data(), static_cast<std::streamsize>(good.size() / 2));
  EXPECT_EQ(kind_of([&] { load_checkpoint(path("b.didickpt")); }), ErrorKind::truncated_file);
}

TEST_F(CheckpointFile, LayoutLengthsAreValidated) {
  const OfflineDataset ds = small_dataset();
  save_checkpoint(tiny_prior(ds).checkpoint(), path("a.didickpt"));
  std::string b = read_file_bytes(path("a.didickpt"));
  const auto at = b.find("param_count=");
  b.replace(at, b.find('\n', at) - at, "param_count=3");
  std::ofstream(path("a.didickpt"), std::ios::binary | std::ios::trunc).write(b.data(), static_cast<std::streamsize>(b.size()));
  EXPECT_EQ(kind_of([&] { load_checkpoint(path("a.didickpt")); }), ErrorKind::io);
}

TEST(ConfigDigest, MismatchWarnsButDoesNotFail) {
  Checkpoint c;
  c.config_digest = "aaaaaaaaaaaaaaaa";
  std::ostringstream log;
  EXPECT_TRUE(check_config_digest(c, "aaaaaaaaaaaaaaaa", log));
  EXPECT_TRUE(log.str().empty());
  EXPECT_FALSE(check_config_digest(c, "bbbbbbbbbbbbbbbb", log));
  EXPECT_NE(log.str().find("warning"), std::string::npos);
}

TEST(Digest, Sha256KnownAnswer) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(crc32_of("123456789"), 0xCBF43926u);
}

}  // namespace
}  // namespace didi
