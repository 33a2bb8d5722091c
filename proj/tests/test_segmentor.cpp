#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace arseg;
using arseg::testing::random_mat;
using arseg::testing::random_pyramid;
using arseg::testing::tiny_models;

namespace {

struct Fixture {
  SegmentationModels<double> m;
  Mat<double> image;
  TokenPyramid pyr;
};

Fixture make(bool next_token, std::uint64_t seed, int depth = 2) {
  auto cfg = tiny_models(next_token);
  cfg.seg.depth = depth;
  cfg = build_variant(AblationFlagSet{next_token, next_token, true}, cfg);
  Fixture f{make_models<double>(cfg, seed), {}, {}};
  Rng rng(seed + 100);
  f.image = random_mat<double>(cfg.seg.prefix_tokens, cfg.seg.width, rng, 0.5);
  f.pyr = random_pyramid(cfg.ae.schedule, cfg.ae.codebook_size, rng);
  return f;
}

double log_softmax_at(const Mat<double>& logits, Index row, int v) {
  const double mx = logits.row(row).maxCoeff();
  return logits(row, v) - mx - std::log((logits.row(row).array() - mx).exp().sum());
}

}  // namespace

TEST(BlockCausalMaskTest, Structure) {
  auto m = BlockCausalMask::build(3, {1, 4, 9});
  ASSERT_EQ(m.size(), 17);
  for (int i = 0; i < m.size(); ++i)
    for (int j = 0; j < 3; ++j) EXPECT_TRUE(m.allowed(i, j));
  EXPECT_FALSE(m.allowed(0, 3));
  EXPECT_TRUE(m.allowed(3, 3));
  EXPECT_FALSE(m.allowed(3, 4));
  EXPECT_TRUE(m.allowed(4, 7));
  EXPECT_FALSE(m.allowed(4, 8));
  EXPECT_TRUE(m.allowed(16, 16));
}

TEST(Segmentor, LogitsShape) {
  auto f = make(false, 1);
  auto logits = f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 0, f.image);
  EXPECT_EQ(logits.rows(), 1 + 4 + 16);
  EXPECT_EQ(logits.cols(), 8);
}

TEST(Segmentor, BlockCausalInvariance) {
  for (std::uint64_t seed : {2, 3, 4}) {
    auto f = make(false, seed);
    const auto& s = f.m.ae.schedule();
    auto base = f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 1, f.image);
    Rng rng(seed);
    for (int k = 0; k < s.scales(); ++k) {
      auto changed = f.pyr;
      for (int j = k + 1; j < s.scales(); ++j)
        for (auto& v : changed.maps[j].indices) v = static_cast<int>(rng() % 8);
      auto out = f.m.seg.forward_teacher_forced(f.m.ae, changed, 1, f.image);
      const Index rows = s.offset(k) + s.tokens(k);
      EXPECT_EQ(Mat<double>(out.topRows(rows)), Mat<double>(base.topRows(rows))) << "scale " << k + 1;
    }
  }
}

TEST(Segmentor, DepthZeroIsPositionwise) {
  auto f = make(false, 5, 0);
  auto base = f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 0, f.image);
  // Without attention a finest-scale row sees its own interpolated input,
  // the image at its own cell, and the start token (through the mean).
  Mat<double> other = f.image;
  const int j = 3, jj = 10;
  other.row(j).array() += 0.7;
  other.row(jj).array() -= 0.7;
  auto moved = f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 0, other);
  const auto& s = f.m.seg.config().schedule;
  const int off = s.offset(s.scales() - 1);
  for (int i = 0; i < s.tokens(s.scales() - 1); ++i) {
    const double d = (moved.row(off + i) - base.row(off + i)).cwiseAbs().maxCoeff();
    if (i == j || i == jj)
      EXPECT_GT(d, 1e-6);
    else
      EXPECT_LT(d, 1e-12) << "row " << i;
  }

  auto g = make(true, 6, 0);
  auto logits = g.m.seg.forward_teacher_forced(g.m.ae, g.pyr, 0, g.image);
  auto changed = g.pyr;
  const int t = 7;
  for (int i = 0; i < changed.maps[0].size(); ++i)
    if (i != t - 1) changed.maps[0].indices[i] = (changed.maps[0].indices[i] + 3) % 8;
  auto out = g.m.seg.forward_teacher_forced(g.m.ae, changed, 0, g.image);
  EXPECT_EQ(Mat<double>(out.row(t)), Mat<double>(logits.row(t)));
}

TEST(Segmentor, IncrementalMatchesTeacherForced) {
  for (bool nt : {false, true}) {
    auto f = make(nt, 7);
    auto tf = f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 1, f.image);
    auto cache = f.m.seg.start_decoding(f.m.ae, f.image, 1);
    std::vector<Mat<double>> parts;
    auto first = f.m.seg.incremental_decode_step(cache, std::nullopt);
    EXPECT_EQ(first.rows(), 1);
    parts.push_back(first);
    const auto blocks = f.m.seg.config().block_sizes();
    const auto flat = f.pyr.flat();
    int row = 0;
    for (std::size_t b = 1; b < blocks.size(); ++b) {
      TokenMap fed = nt ? TokenMap(1, 1, 1, {flat[static_cast<std::size_t>(row)]}) : f.pyr.maps[b - 1];
      row += blocks[b - 1];
      parts.push_back(f.m.seg.incremental_decode_step(cache, fed));
    }
    Mat<double> inc(tf.rows(), tf.cols());
    Index r = 0;
    for (auto& p : parts) {
      inc.middleRows(r, p.rows()) = p;
      r += p.rows();
    }
    ASSERT_EQ(r, tf.rows());
    EXPECT_LE((inc - tf).cwiseAbs().maxCoeff(), 1e-5) << (nt ? "next-token" : "next-scale");
  }
}

TEST(Segmentor, IncrementalMatchesTeacherForcedEightScales) {
  auto cfg = tiny_models();
  cfg.ae.image_size = 64;
  cfg.image.image_size = 64;
  cfg.ae.schedule = ScaleSchedule::default_for(16);
  cfg = build_variant(AblationFlagSet{}, cfg);
  auto m = make_models<double>(cfg, 8);
  Rng rng(8);
  Mat<double> image = random_mat<double>(256, cfg.seg.width, rng, 0.5);
  auto pyr = random_pyramid(cfg.ae.schedule, cfg.ae.codebook_size, rng);
  auto tf = m.seg.forward_teacher_forced(m.ae, pyr, 0, image);
  auto cache = m.seg.start_decoding(m.ae, image, 0);
  double worst = 0;
  Index row = 0;
  for (int k = 0; k < 8; ++k) {
    auto logits = m.seg.incremental_decode_step(cache, k == 0 ? std::nullopt : std::optional<TokenMap>(pyr.maps[k - 1]));
    ASSERT_EQ(logits.rows(), cfg.ae.schedule.tokens(k));
    worst = std::max(worst, (logits - tf.middleRows(row, logits.rows())).cwiseAbs().maxCoeff());
    row += logits.rows();
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Segmentor, GenerateIsDeterministic) {
  auto cfg = tiny_models();
  auto m = make_models<float>(cfg, 9);
  Rng r0(1);
  Mat<float> image = random_mat<float>(cfg.seg.prefix_tokens, cfg.seg.width, r0);
  Rng a(42), b(42);
  auto p1 = m.seg.generate(m.ae, image, 0, 1.0, a);
  auto p2 = m.seg.generate(m.ae, image, 0, 1.0, b);
  EXPECT_EQ(p1, p2);
  ASSERT_EQ(p1.scales(), 3);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(p1.maps[k].size(), cfg.ae.schedule.tokens(k));
}

TEST(Segmentor, DecodingStateErrors) {
  auto f = make(false, 10);
  auto cache = f.m.seg.start_decoding(f.m.ae, f.image, 0);
  EXPECT_THROW(f.m.seg.incremental_decode_step(cache, TokenMap(1, 1, 1)), StateError);
  f.m.seg.incremental_decode_step(cache, std::nullopt);
  EXPECT_THROW(f.m.seg.incremental_decode_step(cache, std::nullopt), StateError);
  EXPECT_THROW(f.m.seg.incremental_decode_step(cache, TokenMap(2, 2, 2)), StateError);
  f.m.seg.incremental_decode_step(cache, f.pyr.maps[0]);
  f.m.seg.incremental_decode_step(cache, f.pyr.maps[1]);
  EXPECT_THROW(f.m.seg.incremental_decode_step(cache, f.pyr.maps[2]), StateError);
  EXPECT_THROW(f.m.seg.start_decoding(f.m.ae, f.image, 2), InvalidInput);
  EXPECT_THROW(f.m.seg.start_decoding(f.m.ae, Mat<double>(Mat<double>::Zero(3, 16)), 0), InvalidInput);
}

TEST(Segmentor, InvalidClass) {
  auto f = make(false, 11);
  EXPECT_THROW(f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 2, f.image), InvalidInput);
  EXPECT_THROW(f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, -1, f.image), InvalidInput);
}

TEST(Segmentor, ClassChangesLogits) {
  auto f = make(false, 12);
  auto a = f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 0, f.image);
  auto b = f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 1, f.image);
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Sampling, OneHotLogits) {
  Rng rng(13);
  Mat<double> logits = Mat<double>::Zero(50, 6);
  for (Index i = 0; i < 50; ++i) logits(i, i % 6) = 1e9;
  for (double temp : {1.0, 5.0}) {
    auto t = sample_next_scale(logits, 5, 10, 1, temp, rng);
    for (Index i = 0; i < 50; ++i) EXPECT_EQ(t.indices[i], i % 6);
  }
}

TEST(Sampling, UniformFrequencies) {
  Mat<double> logits = Mat<double>::Zero(100000, 4);
  auto t = sample_next_scale(logits, 1000, 100, 1, 1.0, std::uint64_t{14});
  std::array<int, 4> counts{};
  for (int v : t.indices) ++counts[static_cast<std::size_t>(v)];
  for (int c : counts) EXPECT_NEAR(c / 100000.0, 0.25, 0.04);
}

TEST(Sampling, LowTemperatureIsArgmax) {
  Rng rng(15);
  Mat<double> logits = random_mat<double>(30, 7, rng);
  auto t = sample_next_scale(logits, 5, 6, 1, 1e-7, rng);
  for (Index i = 0; i < 30; ++i) {
    Index arg;
    logits.row(i).maxCoeff(&arg);
    EXPECT_EQ(t.indices[i], arg);
  }
}

TEST(Sampling, SeededAndValidated) {
  Rng rng(16);
  Mat<double> logits = random_mat<double>(12, 5, rng);
  EXPECT_EQ(sample_next_scale(logits, 3, 4, 2, 1.0, std::uint64_t{3}), sample_next_scale(logits, 3, 4, 2, 1.0, std::uint64_t{3}));
  EXPECT_THROW(sample_next_scale(logits, 3, 4, 2, 0.0, rng), InvalidInput);
  EXPECT_THROW(sample_next_scale(logits, 3, 4, 2, -1.0, rng), InvalidInput);
  EXPECT_THROW(sample_next_scale(logits, 2, 4, 2, 1.0, rng), InvalidInput);
  logits(0, 0) = std::nan("");
  EXPECT_THROW(sample_next_scale(logits, 3, 4, 2, 1.0, rng), InvalidInput);
}

TEST(SequenceNll, UniformLogitsGiveLogV) {
  auto f = make(false, 17);
  auto& head = f.m.seg.params();
  head.at("seg.head.w").value.setZero();
  head.at("seg.head.b").value.setZero();
  EXPECT_NEAR(f.m.seg.sequence_nll(f.m.ae, f.pyr, 0, f.image), std::log(8.0), 1e-9);
}

TEST(SequenceNll, ConfidentTrueTokensGiveZero) {
  Mat<double> logits = Mat<double>::Constant(5, 4, -1e3);
  std::vector<int> truth{0, 3, 2, 2, 1};
  for (int i = 0; i < 5; ++i) logits(i, truth[static_cast<std::size_t>(i)]) = 1e3;
  ag::Tape<double> t(false);
  EXPECT_NEAR(ag::cross_entropy(t.constant(logits), truth).value()(0, 0), 0.0, 1e-12);
}

TEST(SequenceNll, FactorizesOverScales) {
  auto f = make(false, 18);
  const auto& s = f.m.ae.schedule();
  const double nll = f.m.seg.sequence_nll(f.m.ae, f.pyr, 1, f.image);
  auto logits = f.m.seg.forward_teacher_forced(f.m.ae, f.pyr, 1, f.image);
  const auto flat = f.pyr.flat();
  double per_scale_total = 0, log_prod = 0;
  for (int k = 0; k < s.scales(); ++k) {
    double scale_sum = 0;
    for (int i = 0; i < s.tokens(k); ++i) {
      const Index row = s.offset(k) + i;
      scale_sum -= log_softmax_at(logits, row, flat[static_cast<std::size_t>(row)]);
    }
    per_scale_total += (scale_sum / s.tokens(k)) * s.tokens(k);
    log_prod -= scale_sum;
  }
  const double T = s.total_tokens();
  EXPECT_NEAR(per_scale_total, T * nll, 1e-6);
  EXPECT_NEAR(std::exp(-T * nll) / std::exp(log_prod), 1.0, 1e-6);
}

TEST(SequenceNll, GradientsMatchFiniteDifferences) {
  auto f = make(false, 19);
  auto& ps = f.m.seg.params();
  auto loss = [&]() { return f.m.seg.sequence_nll(f.m.ae, f.pyr, 1, f.image); };
  ps.zero_grad();
  {
    ag::Tape<double> t(true);
    auto logits = SegmentorModel<double>::logits_graph(t, ps, f.m.seg.config(), t.constant(f.image), 1,
                                                       teacher_inputs(f.m.ae, f.pyr, false));
    t.backward(ag::cross_entropy(logits, f.pyr.flat()));
  }
  Rng rng(19);
  auto check = arseg::testing::finite_difference_check({&ps}, loss, 50, rng);
  EXPECT_EQ(check.checked, 50);
  EXPECT_LE(check.max_rel, 1e-4);
}
