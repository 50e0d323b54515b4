// Copyright 2026 The Linkstage Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include "gradcheck_cases.hpp"
#include "linkstage/nn.hpp"
#include "test_util.hpp"

namespace linkstage {
namespace {

using testing::CheckCandidateGradients;
using testing::CheckDistillGradients;
using testing::CheckInBatchGradients;
using testing::KindOf;
using testing::RandomSequences;
using testing::TinyEncoderConfig;

nn::GradCheckOptions Sampled(double epsilon, double floor) {
  nn::GradCheckOptions o;
  o.epsilon = epsilon;
  o.floor = floor;
  o.samples_per_tensor = 6;
  return o;
}

TEST(EncoderGradients, InBatchLossAt32Bit) {
  const auto r = CheckInBatchGradients<float>(3, 2, Sampled(1e-4, 1e-4));
  EXPECT_LE(r.mention.max_relative_error, 1e-3) << r.mention.worst;
  EXPECT_LE(r.entity.max_relative_error, 1e-3) << r.entity.worst;
  EXPECT_GT(r.mention.checked, 100u);
}

TEST(EncoderGradients, InBatchLossAt64Bit) {
  const auto r = CheckInBatchGradients<double>(3, 1, Sampled(1e-5, 1e-6));
  EXPECT_LE(r.max(), 1e-4) << r.mention.worst << " / " << r.entity.worst;
}

TEST(EncoderGradients, CandidateLossAt32Bit) {
  const auto r = CheckCandidateGradients<float>(4, 2, Sampled(1e-4, 1e-4));
  EXPECT_LE(r.encoder.max_relative_error, 1e-3) << r.encoder.worst;
  EXPECT_LE(r.head.max_relative_error, 1e-3) << r.head.worst;
}

TEST(EncoderGradients, DistillLossAt32Bit) {
  KdConfig kd;
  kd.temperature = 2.0;
  kd.alpha = 0.5;
  const auto r = CheckDistillGradients<float>(4, 1, kd, Sampled(1e-4, 1e-4));
  EXPECT_LE(r.max(), 1e-3) << r.mention.worst << " / " << r.entity.worst;
}

TEST(EncoderForward, PaddingDoesNotChangeRealPositions) {
  const auto model = nn::EncoderModel::Init(TinyEncoderConfig());
  auto seqs = RandomSequences(1, 5, 24, 3);
  seqs[0].length = 5;
  seqs[0].ids = {special::kCls, 9, 10, 11, special::kSep};
  TokenSequence padded = seqs[0];
  padded.ids.resize(10, special::kPad);
  const auto a = nn::EncoderForward(model, std::span(seqs));
  const auto b = nn::EncoderForward(model, std::span<const TokenSequence>(&padded, 1));
  EXPECT_TRUE(a.cls.isApprox(b.cls, 1e-6f));
  EXPECT_TRUE(a.hidden[0].isApprox(b.hidden[0].topRows(5), 1e-6f));
  EXPECT_TRUE(b.hidden[0].bottomRows(5).isZero());
  // Garbage in the padded tail is ignored as well.
  padded.ids[7] = 13;
  const auto c = nn::EncoderForward(model, std::span<const TokenSequence>(&padded, 1));
  EXPECT_EQ(b.cls, c.cls);
}

TEST(EncoderForward, ClsPathsAgree) {
  const auto model = nn::EncoderModel::Init(TinyEncoderConfig());
  const auto seqs = RandomSequences(4, 8, 24, 4);
  const auto full = nn::EncoderForward(model, std::span(seqs));
  nn::BatchTape<float> tape;
  EXPECT_TRUE(full.cls.isApprox(nn::EncodeCls(model, std::span(seqs)), 1e-6f));
  EXPECT_TRUE(full.cls.isApprox(nn::EncodeClsForTraining(model, std::span(seqs), tape), 1e-6f));
}

TEST(EncoderForward, RejectsBadBatches) {
  const auto model = nn::EncoderModel::Init(TinyEncoderConfig());
  auto seqs = RandomSequences(2, 6, 24, 5);
  seqs[1].ids.push_back(special::kPad);
  EXPECT_EQ(KindOf([&] { nn::EncodeCls(model, std::span(seqs)); }), ErrorKind::kModel);
  auto long_seq = RandomSequences(1, 11, 24, 5);
  EXPECT_EQ(KindOf([&] { nn::EncodeCls(model, std::span(long_seq)); }), ErrorKind::kModel);
  auto bad_token = RandomSequences(1, 6, 24, 5);
  bad_token[0].ids[1] = 24;
  EXPECT_EQ(KindOf([&] { nn::EncodeCls(model, std::span(bad_token)); }), ErrorKind::kModel);
}

TEST(EncoderInit, SeededAndShaped) {
  const auto cfg = TinyEncoderConfig();
  const auto a = nn::EncoderModel::Init(cfg);
  const auto b = nn::EncoderModel::Init(cfg);
  EXPECT_EQ(nn::ModelFingerprint(a), nn::ModelFingerprint(b));
  auto other = cfg;
  other.seed = 99;
  EXPECT_NE(nn::ModelFingerprint(a), nn::ModelFingerprint(nn::EncoderModel::Init(other)));
  EXPECT_LE(a.weights.token_embedding.cwiseAbs().maxCoeff(), 0.05f);
  EXPECT_EQ(a.weights.token_embedding.rows(), 24);
  auto bad = cfg;
  bad.n_heads = 3;
  EXPECT_EQ(KindOf([&] { nn::EncoderModel::Init(bad); }), ErrorKind::kConfig);
}

TEST(GradCheck, RejectsNonPositiveEpsilon) {
  nn::GradCheckOptions o;
  o.epsilon = 0.0;
  const std::vector<double> g = {0.0};
  EXPECT_EQ(KindOf([&] {
              nn::FiniteDifferenceCheck(std::vector<double>{1.0}, std::span<const double>(g),
                                        [](std::span<const double>) { return 0.0; }, o);
            }),
            ErrorKind::kConfig);
}

TEST(GradCheck, DetectsWrongGradient) {
  const std::vector<double> wrong = {1.0};
  const auto r = nn::FiniteDifferenceCheck(
      std::vector<double>{2.0}, std::span<const double>(wrong),
      [](std::span<const double> p) { return p[0] * p[0]; }, nn::GradCheckOptions{});
  EXPECT_NEAR(r.max_relative_error, 0.75, 1e-6);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  nn::Matrix<float> p(1, 3);
  p << 1.0f, 1.0f, 1.0f;
  nn::Matrix<float> g(1, 3);
  g << 0.5f, -2.0f, 1e-3f;
  std::vector<nn::Matrix<float>*> params = {&p};
  auto state = nn::AdamState::For(params, nn::AdamOptions{});
  nn::AdamStep(params, {&g}, state);
  EXPECT_NEAR(p(0, 0), 1.0f - 1e-3f, 1e-6f);
  EXPECT_NEAR(p(0, 1), 1.0f + 1e-3f, 1e-6f);
  EXPECT_NEAR(p(0, 2), 1.0f - 1e-3f, 1e-6f);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto model = nn::EncoderModel::Init(TinyEncoderConfig());
  const auto before = nn::ModelFingerprint(model);
  auto grads = nn::GradientSet::Zeros(model.config);
  auto params = nn::ParameterList(model.weights);
  auto state = nn::AdamState::For(params, nn::AdamOptions{});
  for (int i = 0; i < 3; ++i) {
    nn::AdamStep(params, nn::ParameterList(std::as_const(grads.grads)), state);
  }
  EXPECT_EQ(nn::ModelFingerprint(model), before);
}

TEST(Adam, MinimizesQuadratic) {
  nn::Matrix<double> x(1, 2);
  x << -4.0, 10.0;
  std::vector<nn::Matrix<double>*> params = {&x};
  nn::AdamOptions o;
  o.learning_rate = 0.05;
  auto state = nn::BasicAdamState<double>::For(params, o);
  for (int i = 0; i < 2000; ++i) {
    nn::Matrix<double> g(1, 2);
    g << 2 * (x(0, 0) - 3.0), 2 * (x(0, 1) + 1.0);
    nn::AdamStep(params, {&g}, state);
  }
  EXPECT_NEAR(x(0, 0), 3.0, 1e-3);
  EXPECT_NEAR(x(0, 1), -1.0, 1e-3);
}

TEST(Adam, RejectsNonFiniteGradients) {
  nn::Matrix<float> p = nn::Matrix<float>::Zero(1, 1);
  nn::Matrix<float> g(1, 1);
  g << std::numeric_limits<float>::quiet_NaN();
  std::vector<nn::Matrix<float>*> params = {&p};
  auto state = nn::AdamState::For(params, nn::AdamOptions{});
  EXPECT_EQ(KindOf([&] { nn::AdamStep(params, {&g}, state); }), ErrorKind::kModel);
}

TEST(TokenRows, RedrawAndFreeze) {
  auto a = nn::EncoderModel::Init(TinyEncoderConfig());
  auto b = nn::EncoderModel::Init(TinyEncoderConfig(6));
  const std::vector<TokenId> rows = {8, 12};
  Rng rng(3);
  const auto untouched = a.weights.token_embedding.row(9).eval();
  nn::RedrawTokenRows<float>({&a, &b}, rows, rng);
  EXPECT_EQ(a.weights.token_embedding.row(8), b.weights.token_embedding.row(8));
  EXPECT_EQ(a.weights.token_embedding.row(12), b.weights.token_embedding.row(12));
  EXPECT_EQ(a.weights.token_embedding.row(9), untouched);
  EXPECT_LE(a.weights.token_embedding.row(8).cwiseAbs().maxCoeff(), 0.05f);

  auto grads = nn::GradientSet::Zeros(a.config);
  grads.grads.token_embedding.setOnes();
  nn::ZeroTokenRows(grads, rows);
  EXPECT_TRUE(grads.grads.token_embedding.row(8).isZero());
  EXPECT_EQ(grads.grads.token_embedding.row(9).sum(), 8.0f);
}

TEST(Checkpoint, RoundTripsModelAndExtras) {
  testing::TempDir dir("nn_ckpt");
  const auto model = nn::EncoderModel::Init(TinyEncoderConfig());
  nn::Matrix<float> w(1, 8);
  w.setConstant(0.25f);
  nn::SaveCheckpoint(dir.path() / "m.ckpt", model, {{"cross.w", w}});
  const auto loaded = nn::LoadCheckpoint(dir.path() / "m.ckpt");
  EXPECT_EQ(loaded.model.config, model.config);
  EXPECT_EQ(nn::ModelFingerprint(loaded.model), nn::ModelFingerprint(model));
  EXPECT_EQ(loaded.extras.at("cross.w"), w);
}

TEST(Checkpoint, RejectsMissingAndCorruptFiles) {
  testing::TempDir dir("nn_bad_ckpt");
  EXPECT_EQ(KindOf([&] { nn::LoadCheckpoint(dir.path() / "absent.ckpt"); }), ErrorKind::kModel);
  testing::WriteFile(dir.path() / "junk.ckpt", "not a checkpoint");
  EXPECT_EQ(KindOf([&] { nn::LoadCheckpoint(dir.path() / "junk.ckpt"); }), ErrorKind::kModel);
}

}  // namespace
}  // namespace linkstage
