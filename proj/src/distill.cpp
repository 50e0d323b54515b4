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

#include "linkstage/distill.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "linkstage/log.hpp"
#include "linkstage/random.hpp"

namespace linkstage {
namespace {

using nn::Matrix;

double TopOneAccuracy(const BiEncoder& student, const KnowledgeBase& kb,
                      std::span<const Mention> mentions) {
  if (mentions.empty()) return 0.0;
  const auto table = BuildEmbeddingTable(student, kb);
  const auto top = RetrieveTopK(student, mentions, table, 1);
  size_t hits = 0;
  for (size_t i = 0; i < mentions.size(); ++i) {
    if (!top[i].empty() && top[i][0].id == mentions[i].gold_entity_id) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(mentions.size());
}

}  // namespace

void KdConfig::Validate() const {
  auto bad = [](const std::string& what) {
    Fail(ErrorKind::kConfig, "invalid distillation config: " + what);
  };
  if (!(temperature > 0.0) || !std::isfinite(temperature)) bad("temperature must be > 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) bad("alpha must be in [0, 1]");
  if (k < 1) bad("k must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) bad("learning_rate must be >= 0");
  if (refresh_interval < 1) bad("refresh_interval must be >= 1");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    bad("validation_fraction must be in [0, 1)");
  }
}

KdTrainResult TrainDistilled(const CrossEncoder* teacher, BiEncoder student,
                             const ZeroShotSplit& split, const KdConfig& config) {
  config.Validate();
  if (teacher == nullptr && config.alpha != 1.0) {
    Fail(ErrorKind::kModel, "distillation with alpha < 1 needs a teacher");
  }
  const KnowledgeBase& kb = split.train_kb;
  if (kb.empty()) Fail(ErrorKind::kData, "empty candidate sets: training KB is empty");
  const HeldOut held = HoldOut(split.train_examples, config.validation_fraction, config.seed);
  const std::vector<Mention>& train = held.train;
  if (train.empty()) Fail(ErrorKind::kData, "no training mentions for distillation");
  for (const auto& m : train) {
    if (!kb.Contains(m.gold_entity_id)) {
      Fail(ErrorKind::kData, "training mention " + std::to_string(m.id) +
                                 " has gold outside the training KB");
    }
  }

  const auto mention_inputs = MentionInputs(student, train);
  const auto entity_inputs = EntityInputs(student, kb.entities());
  const size_t k = std::min(config.k, kb.size());

  const nn::AdamOptions adam{config.learning_rate};
  auto mention_params = nn::ParameterList(student.mention_encoder.weights);
  auto entity_params = nn::ParameterList(student.entity_encoder.weights);
  auto mention_state = nn::AdamState::For(mention_params, adam);
  auto entity_state = nn::AdamState::For(entity_params, adam);
  auto mention_grads = nn::GradientSet::Zeros(student.mention_encoder.config);
  auto entity_grads = nn::GradientSet::Zeros(student.entity_encoder.config);
  const auto mention_grad_list = nn::ParameterList(std::as_const(mention_grads.grads));
  const auto entity_grad_list = nn::ParameterList(std::as_const(entity_grads.grads));

  // Teacher logits depend only on (mention, entity); cache them.
  std::unordered_map<uint64_t, float> teacher_cache;
  auto teacher_logits = [&](size_t mi, const std::vector<size_t>& positions) {
    Matrix<float> out(1, static_cast<Eigen::Index>(positions.size()));
    std::vector<EntityId> missing;
    for (size_t pos : positions) {
      if (!teacher_cache.count((static_cast<uint64_t>(mi) << 32) | pos)) {
        missing.push_back(kb[pos].id);
      }
    }
    if (!missing.empty()) {
      const Matrix<float> fresh = ScoreCandidates(*teacher, train[mi], kb, missing);
      for (size_t j = 0; j < missing.size(); ++j) {
        const uint64_t key = (static_cast<uint64_t>(mi) << 32) | *kb.Position(missing[j]);
        teacher_cache[key] = fresh(0, static_cast<Eigen::Index>(j));
      }
    }
    for (size_t j = 0; j < positions.size(); ++j) {
      out(0, static_cast<Eigen::Index>(j)) =
          teacher_cache.at((static_cast<uint64_t>(mi) << 32) | positions[j]);
    }
    return out;
  };

  KdTrainResult result;
  Rng rng(config.seed);
  Rng token_rng(config.seed ^ 0x5851f42d4c957f2dULL);
  const std::vector<TokenId> anonymous = config.anonymize_domain_tokens
                                             ? DomainSpecificTokens(split, *student.vocab)
                                             : std::vector<TokenId>{};
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  // lists[i] holds KB positions of mention i's candidates; gold_at[i] its gold slot.
  std::vector<std::vector<size_t>> lists(train.size());
  std::vector<size_t> gold_at(train.size(), 0);

  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (epoch % config.refresh_interval == 0) {
      const auto table = BuildEmbeddingTable(student, kb);
      const auto retrieved = RetrieveTopK(student, train, table, k);
      size_t inserted = 0;
      for (size_t i = 0; i < train.size(); ++i) {
        auto& list = lists[i];
        list.clear();
        for (const auto& h : retrieved[i]) list.push_back(*kb.Position(h.id));
        const size_t gold_pos = *kb.Position(train[i].gold_entity_id);
        auto it = std::find(list.begin(), list.end(), gold_pos);
        if (it == list.end()) {
          list.back() = gold_pos;
          it = list.end() - 1;
          ++inserted;
        }
        gold_at[i] = static_cast<size_t>(it - list.begin());
      }
      spdlog::debug("distill epoch {}: refreshed candidates, gold inserted for {} mentions",
                    epoch + 1, inserted);
    }
    nn::RedrawTokenRows<float>({&student.mention_encoder, &student.entity_encoder}, anonymous,
                               token_rng);
    rng.Shuffle(order);
    double sum_st = 0.0, sum_dist = 0.0, sum_total = 0.0;
    for (size_t start = 0; start < order.size(); start += config.batch_size) {
      const size_t b = std::min(config.batch_size, order.size() - start);
      std::vector<TokenSequence> m_in;
      std::vector<TokenSequence> e_in;
      m_in.reserve(b);
      e_in.reserve(b * k);
      for (size_t r = 0; r < b; ++r) {
        const size_t mi = order[start + r];
        m_in.push_back(mention_inputs[mi]);
        for (size_t pos : lists[mi]) e_in.push_back(entity_inputs[pos]);
      }
      nn::BatchTape<float> m_tape;
      nn::BatchTape<float> e_tape;
      const Matrix<float> ym = nn::EncodeClsForTraining(
          student.mention_encoder, std::span<const TokenSequence>(m_in), m_tape);
      const Matrix<float> ye = nn::EncodeClsForTraining(
          student.entity_encoder, std::span<const TokenSequence>(e_in), e_tape);
      Matrix<float> d_ym = Matrix<float>::Zero(ym.rows(), ym.cols());
      Matrix<float> d_ye(ye.rows(), ye.cols());
      const float inv_b = 1.0f / static_cast<float>(b);
      const auto ki = static_cast<Eigen::Index>(k);
      for (size_t r = 0; r < b; ++r) {
        const size_t mi = order[start + r];
        const auto ri = static_cast<Eigen::Index>(r);
        const auto block = ye.middleRows(ri * ki, ki);
        const Matrix<float> zs = ym.row(ri) * block.transpose();
        const Matrix<float> zt =
            teacher != nullptr ? teacher_logits(mi, lists[mi]) : Matrix<float>::Zero(1, ki);
        const auto loss = KdLoss<float>(zt, zs, static_cast<Eigen::Index>(gold_at[mi]), config);
        sum_st += loss.l_st;
        sum_dist += teacher != nullptr ? loss.l_dist : 0.0f;
        sum_total += loss.total;
        const Matrix<float> g = loss.grad * inv_b;
        d_ym.row(ri) = g * block;
        d_ye.middleRows(ri * ki, ki) = g.transpose() * ym.row(ri);
      }
      mention_grads.SetZero();
      entity_grads.SetZero();
      nn::EncoderBackward(student.mention_encoder, m_tape, d_ym, mention_grads);
      nn::EncoderBackward(student.entity_encoder, e_tape, d_ye, entity_grads);
      nn::ZeroTokenRows(mention_grads, anonymous);
      nn::ZeroTokenRows(entity_grads, anonymous);
      nn::AdamStep(mention_params, mention_grad_list, mention_state);
      nn::AdamStep(entity_params, entity_grad_list, entity_state);
    }
    const double n = static_cast<double>(train.size());
    KdEpochLog entry;
    entry.epoch = epoch + 1;
    entry.l_st = sum_st / n;
    entry.l_dist = sum_dist / n;
    entry.l_total = sum_total / n;
    entry.val_acc = TopOneAccuracy(student, kb, held.validation);
    result.log.push_back(entry);
    spdlog::info("distill epoch {}: l_st {:.4f}, l_dist {:.4f}, l_total {:.4f}, val_acc {:.4f}",
                 entry.epoch, entry.l_st, entry.l_dist, entry.l_total, entry.val_acc);
  }
  result.student = std::move(student);
  return result;
}

void WriteKdLog(const std::vector<KdEpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) Fail(ErrorKind::kConfig, "cannot write " + path.string());
  for (const auto& e : log) {
    nlohmann::json row = {{"epoch", e.epoch},     {"l_st", e.l_st},
                          {"l_dist", e.l_dist},   {"l_total", e.l_total},
                          {"val_acc", e.val_acc}};
    out << row.dump() << '\n';
  }
}

}  // namespace linkstage
