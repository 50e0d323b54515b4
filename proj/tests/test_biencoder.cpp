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

#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "gradcheck_cases.hpp"
#include "linkstage/ann.hpp"
#include "linkstage/biencoder.hpp"
#include "test_util.hpp"

namespace linkstage {
namespace {

using testing::KindOf;
using testing::SmallBiEncoder;
using testing::TempDir;
using testing::TinySplit;
using M = nn::Matrix<double>;

M Rows(std::initializer_list<std::initializer_list<double>> rows) {
  M m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

TEST(ScorePairs, DotProducts) {
  EXPECT_DOUBLE_EQ(ScorePairs(Rows({{1, 2}}), Rows({{3, 4}}))(0, 0), 11.0);
  const M s = ScorePairs(Rows({{1, 0}, {0, 1}}), Rows({{2, 0}, {0, 3}}));
  EXPECT_EQ(s, Rows({{2, 0}, {0, 3}}));
  EXPECT_EQ(KindOf([] { ScorePairs(Rows({{1, 2}}), Rows({{1, 2, 3}})); }), ErrorKind::kModel);
}

TEST(InBatchLoss, KnownValues) {
  const auto l = InBatchLoss(Rows({{2, 0}, {0, 2}}));
  EXPECT_NEAR(l.loss, std::log(1 + std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(l.loss, 0.126928, 1e-6);
  const auto single = InBatchLoss(Rows({{5.5}}));
  EXPECT_NEAR(single.loss, 0.0, 1e-7);
  EXPECT_NEAR(single.grad(0, 0), 0.0, 1e-12);
}

TEST(InBatchLoss, SingleRowIsExactlyZeroAt32Bit) {
  nn::Matrix<float> s(1, 1);
  s << -3.25f;
  EXPECT_NEAR(InBatchLoss(s).loss, 0.0f, 1e-7f);
}

TEST(InBatchLoss, InvariantToRowShift) {
  const M s = Rows({{1.5, -2, 0.25}, {0.5, 3, -1}});
  M shifted = s;
  shifted.row(0).array() += 7.0;
  shifted.row(1).array() -= 4.0;
  const auto a = InBatchLoss(s);
  const auto b = InBatchLoss(shifted);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  EXPECT_TRUE(a.grad.isApprox(b.grad, 1e-12));
}

TEST(InBatchLoss, HardNegativeColumnsOnlyAddToDenominator) {
  const M s = Rows({{2, 0, -50}, {0, 2, -50}});
  EXPECT_NEAR(InBatchLoss(s).loss, 0.126928, 1e-6);
  EXPECT_EQ(KindOf([] { InBatchLoss(Rows({{1}, {2}})); }), ErrorKind::kInternal);
}

TEST(InBatchLoss, LogitGradientsMatchFiniteDifferences) {
  EXPECT_LE(testing::InBatchLogitCheck(Rows({{1.5, -2, 0.25, 4}, {0.5, 3, -1, 0}})), 1e-6);
  EXPECT_LE(testing::InBatchLogitCheck(Rows({{0.3}})), 1e-6);
}

TEST(UniqueGoldBatches, NoRepeatedGoldAndEveryMentionOnce) {
  std::vector<EntityId> golds = {1, 1, 2, 3, 1, 4, 2, 5};
  std::vector<size_t> order = {7, 6, 5, 4, 3, 2, 1, 0};
  const auto batches = UniqueGoldBatches(order, golds, 3);
  std::multiset<size_t> seen;
  for (const auto& b : batches) {
    EXPECT_LE(b.size(), 3u);
    std::set<EntityId> g;
    for (size_t i : b) {
      EXPECT_TRUE(g.insert(golds[i]).second);
      seen.insert(i);
    }
  }
  EXPECT_EQ(seen, std::multiset<size_t>(order.begin(), order.end()));
}

class TrainedFixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    split_ = new ZeroShotSplit(TinySplit(12, 3, 5));
    model_ = new BiEncoder(SmallBiEncoder(*split_));
  }
  static void TearDownTestSuite() {
    delete model_;
    delete split_;
  }
  static ZeroShotSplit* split_;
  static BiEncoder* model_;
};
ZeroShotSplit* TrainedFixture::split_ = nullptr;
BiEncoder* TrainedFixture::model_ = nullptr;

TEST_F(TrainedFixture, TowersStartIdentical) {
  EXPECT_EQ(nn::ModelFingerprint(model_->mention_encoder),
            nn::ModelFingerprint(model_->entity_encoder));
}

TEST_F(TrainedFixture, HardNegativesMatchBruteForce) {
  const auto table = BuildEmbeddingTable(*model_, split_->train_kb);
  const auto mentions = EmbedMentions(*model_, split_->train_examples);
  const auto mined = MineHardNegatives(*model_, split_->train_examples, table, 4);
  ASSERT_EQ(mined.size(), split_->train_examples.size());
  for (size_t i = 0; i < mined.size(); ++i) {
    std::vector<SearchHit> all;
    for (size_t r = 0; r < table.size(); ++r) {
      all.push_back({table.IdOf(r), InnerProduct(std::span<const float>(mentions.data() +
                                                                            i * table.dim(),
                                                                        table.dim()),
                                                 table.Row(r))});
    }
    std::sort(all.begin(), all.end(), RanksBefore);
    std::vector<EntityId> expected;
    for (const auto& h : all) {
      if (h.id != split_->train_examples[i].gold_entity_id && expected.size() < 4) {
        expected.push_back(h.id);
      }
    }
    EXPECT_EQ(mined[i], expected) << "mention " << i;
  }
}

TEST_F(TrainedFixture, HardNegativesClipToKbSize) {
  std::vector<Entity> five(split_->train_kb.entities().begin(),
                           split_->train_kb.entities().begin() + 5);
  const KnowledgeBase kb(five);
  const auto table = BuildEmbeddingTable(*model_, kb);
  const Mention m = testing::MakeMention(1, "a", "b", "c", five[2].id);
  const auto mined = MineHardNegatives(*model_, std::span(&m, 1), table, 10);
  ASSERT_EQ(mined[0].size(), 4u);
  EXPECT_EQ(std::count(mined[0].begin(), mined[0].end(), five[2].id), 0);
  const KnowledgeBase one(std::vector<Entity>{five[0]});
  EXPECT_EQ(KindOf([&] {
              MineHardNegatives(*model_, std::span(&m, 1), BuildEmbeddingTable(*model_, one), 1);
            }),
            ErrorKind::kData);
}

TEST_F(TrainedFixture, TableMatchesFreshEmbeddings) {
  const auto table = BuildEmbeddingTable(*model_, split_->test_kb);
  const auto fresh = EmbedEntities(*model_, split_->test_kb.entities());
  EXPECT_TRUE(table.vectors().isApprox(fresh, 1e-6f));
  EXPECT_EQ(table.model_fingerprint(), nn::ModelFingerprint(model_->entity_encoder));
  for (size_t r = 0; r < table.size(); ++r) {
    EXPECT_EQ(table.IdOf(r), split_->test_kb.entities()[r].id);
  }
  TempDir dir("bi_table");
  table.Save(dir.path() / "t.emb");
  EXPECT_EQ(EntityEmbeddingTable::Load(dir.path() / "t.emb"), table);
}

TEST_F(TrainedFixture, SaveLoadRoundTrip) {
  TempDir dir("bi_ckpt");
  model_->Save(dir.path());
  const auto loaded = BiEncoder::Load(dir.path());
  EXPECT_EQ(nn::ModelFingerprint(loaded.mention_encoder),
            nn::ModelFingerprint(model_->mention_encoder));
  EXPECT_EQ(*loaded.vocab, *model_->vocab);
  EXPECT_EQ(loaded.mention_max_len, model_->mention_max_len);
  EXPECT_EQ(KindOf([&] { BiEncoder::Load(dir.path(), "absent"); }), ErrorKind::kModel);
}

BiEncoderTrainConfig QuickConfig() {
  BiEncoderTrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.hard_negatives = 2;
  c.hard_negative_start = 1;
  c.hard_negative_refresh = 1;
  c.validation_fraction = 0.25;
  c.validation_k = 4;
  return c;
}

TEST_F(TrainedFixture, ZeroLearningRateLeavesParameters) {
  auto c = QuickConfig();
  c.learning_rate = 0.0;
  c.anonymize_domain_tokens = false;
  const auto r = TrainBiEncoder(*split_, *model_, c);
  EXPECT_EQ(nn::ModelFingerprint(r.model.mention_encoder),
            nn::ModelFingerprint(model_->mention_encoder));
  EXPECT_EQ(nn::ModelFingerprint(r.model.entity_encoder),
            nn::ModelFingerprint(model_->entity_encoder));
  ASSERT_EQ(r.log.size(), 3u);
  EXPECT_EQ(r.log[0].validation_recall, r.log[2].validation_recall);
}

TEST_F(TrainedFixture, TrainingIsDeterministicAndLogged) {
  const auto a = TrainBiEncoder(*split_, *model_, QuickConfig());
  const auto b = TrainBiEncoder(*split_, *model_, QuickConfig());
  EXPECT_EQ(nn::ModelFingerprint(a.model.mention_encoder),
            nn::ModelFingerprint(b.model.mention_encoder));
  EXPECT_EQ(nn::ModelFingerprint(a.model.entity_encoder),
            nn::ModelFingerprint(b.model.entity_encoder));
  ASSERT_EQ(a.log.size(), 3u);
  for (size_t e = 0; e < a.log.size(); ++e) {
    EXPECT_EQ(a.log[e].epoch, e);
    EXPECT_EQ(a.log[e].loss, b.log[e].loss);
    EXPECT_TRUE(std::isfinite(a.log[e].loss));
  }
  EXPECT_NE(nn::ModelFingerprint(a.model.mention_encoder),
            nn::ModelFingerprint(model_->mention_encoder));
}

TEST_F(TrainedFixture, TrainingReducesLoss) {
  auto c = QuickConfig();
  c.epochs = 8;
  c.hard_negatives = 0;
  c.learning_rate = 3e-3;
  const auto r = TrainBiEncoder(*split_, *model_, c);
  EXPECT_LT(r.log.back().loss, r.log[1].loss);
}

TEST(BiEncoderTrainConfig, RejectsInvalidValues) {
  BiEncoderTrainConfig c;
  c.batch_size = 0;
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);
  c = {};
  c.learning_rate = -1.0;
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);
  c = {};
  c.validation_fraction = 1.0;
  EXPECT_EQ(KindOf([&] { c.Validate(); }), ErrorKind::kConfig);
}

TEST(HoldOut, PartitionsDeterministically) {
  const auto split = TinySplit(10, 2);
  const auto a = HoldOut(split.train_examples, 0.25, 3);
  const auto b = HoldOut(split.train_examples, 0.25, 3);
  EXPECT_EQ(a.validation.size(), 5u);
  EXPECT_EQ(a.train.size() + a.validation.size(), split.train_examples.size());
  EXPECT_EQ(a.validation, b.validation);
  EXPECT_EQ(HoldOut(split.train_examples, 0.0, 3).validation.size(), 0u);
}

}  // namespace
}  // namespace linkstage
