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

#include "linkstage/biencoder.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "linkstage/log.hpp"
#include "linkstage/parallel.hpp"
#include "linkstage/random.hpp"

namespace linkstage {
namespace {

using nn::Matrix;

constexpr const char* kMaxLenTensor = "input.max_len";

void CheckLengths(const nn::EncoderConfig& config, size_t mention_max_len,
                  size_t entity_max_len) {
  if (mention_max_len > config.max_positions || entity_max_len > config.max_positions) {
    Fail(ErrorKind::kConfig, "input max_len exceeds encoder max_positions");
  }
}

// Recall of gold ids within `results`.
double RecallOf(const std::vector<SearchResult>& results, std::span<const Mention> mentions) {
  if (mentions.empty()) return 0.0;
  size_t hits = 0;
  for (size_t i = 0; i < mentions.size(); ++i) {
    for (const auto& h : results[i]) {
      if (h.id == mentions[i].gold_entity_id) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(mentions.size());
}

}  // namespace

BiEncoder BiEncoder::Init(nn::EncoderConfig config, std::shared_ptr<const Vocab> vocab,
                          size_t mention_max_len, size_t entity_max_len) {
  if (!vocab) Fail(ErrorKind::kConfig, "bi-encoder needs a vocabulary");
  config.vocab_size = static_cast<uint32_t>(vocab->size());
  CheckLengths(config, mention_max_len, entity_max_len);
  BiEncoder model;
  model.mention_encoder = nn::EncoderModel::Init(config);
  model.entity_encoder = model.mention_encoder;
  model.vocab = std::move(vocab);
  model.mention_max_len = mention_max_len;
  model.entity_max_len = entity_max_len;
  return model;
}

void BiEncoder::Save(const std::filesystem::path& dir, const std::string& prefix) const {
  std::filesystem::create_directories(dir);
  Matrix<float> lens(1, 2);
  lens << static_cast<float>(mention_max_len), static_cast<float>(entity_max_len);
  nn::SaveCheckpoint(dir / (prefix + "_mention.ckpt"), mention_encoder, {{kMaxLenTensor, lens}});
  nn::SaveCheckpoint(dir / (prefix + "_entity.ckpt"), entity_encoder, {{kMaxLenTensor, lens}});
  SaveVocab(*vocab, dir / (prefix + "_vocab.jsonl"));
}

BiEncoder BiEncoder::Load(const std::filesystem::path& dir, const std::string& prefix) {
  auto mention = nn::LoadCheckpoint(dir / (prefix + "_mention.ckpt"));
  auto entity = nn::LoadCheckpoint(dir / (prefix + "_entity.ckpt"));
  if (mention.model.config.embed_dim != entity.model.config.embed_dim) {
    Fail(ErrorKind::kModel, "bi-encoder towers disagree on embed_dim");
  }
  BiEncoder model;
  model.mention_encoder = std::move(mention.model);
  model.entity_encoder = std::move(entity.model);
  model.vocab = std::make_shared<const Vocab>(LoadVocab(dir / (prefix + "_vocab.jsonl")));
  if (model.vocab->size() != model.mention_encoder.config.vocab_size ||
      model.vocab->size() != model.entity_encoder.config.vocab_size) {
    Fail(ErrorKind::kModel, "vocabulary size does not match the checkpoints");
  }
  auto it = mention.extras.find(kMaxLenTensor);
  if (it == mention.extras.end() || it->second.size() != 2) {
    Fail(ErrorKind::kModel, "bi-encoder checkpoint lacks input lengths");
  }
  model.mention_max_len = static_cast<size_t>(it->second(0, 0));
  model.entity_max_len = static_cast<size_t>(it->second(0, 1));
  return model;
}

std::vector<TokenSequence> MentionInputs(const BiEncoder& model,
                                         std::span<const Mention> mentions) {
  std::vector<TokenSequence> out;
  out.reserve(mentions.size());
  for (const auto& m : mentions) {
    out.push_back(BuildMentionInput(m, *model.vocab, model.mention_max_len));
  }
  return out;
}

std::vector<TokenSequence> EntityInputs(const BiEncoder& model,
                                        std::span<const Entity> entities) {
  std::vector<TokenSequence> out;
  out.reserve(entities.size());
  for (const auto& e : entities) {
    out.push_back(BuildEntityInput(e, *model.vocab, model.entity_max_len));
  }
  return out;
}

EmbeddingMatrix EmbedMentions(const BiEncoder& model, std::span<const Mention> mentions) {
  const auto inputs = MentionInputs(model, mentions);
  if (inputs.empty()) return EmbeddingMatrix(0, model.mention_encoder.config.embed_dim);
  return nn::EncodeCls(model.mention_encoder, std::span<const TokenSequence>(inputs));
}

EmbeddingMatrix EmbedEntities(const BiEncoder& model, std::span<const Entity> entities) {
  const auto inputs = EntityInputs(model, entities);
  if (inputs.empty()) return EmbeddingMatrix(0, model.entity_encoder.config.embed_dim);
  return nn::EncodeCls(model.entity_encoder, std::span<const TokenSequence>(inputs));
}

EntityEmbeddingTable BuildEmbeddingTable(const BiEncoder& model, const KnowledgeBase& kb) {
  std::vector<EntityId> ids;
  ids.reserve(kb.size());
  for (const auto& e : kb.entities()) ids.push_back(e.id);
  return EntityEmbeddingTable(EmbedEntities(model, kb.entities()), std::move(ids),
                              nn::ModelFingerprint(model.entity_encoder));
}

std::vector<SearchResult> RetrieveTopK(const BiEncoder& model,
                                       std::span<const Mention> mentions,
                                       const EntityEmbeddingTable& table, size_t k) {
  const EmbeddingMatrix queries = EmbedMentions(model, mentions);
  std::vector<SearchResult> out(mentions.size());
  ParallelFor(mentions.size(), [&](size_t begin, size_t end, int) {
    for (size_t i = begin; i < end; ++i) {
      out[i] = ExactSearch(table, {queries.data() + i * table.dim(), table.dim()}, k);
    }
  });
  return out;
}

std::vector<std::vector<EntityId>> MineHardNegatives(const BiEncoder& model,
                                                     std::span<const Mention> mentions,
                                                     const EntityEmbeddingTable& table,
                                                     size_t top_n) {
  if (table.size() < 2) Fail(ErrorKind::kData, "hard-negative mining needs >= 2 entities");
  const size_t depth = std::min(table.size(), top_n + 1);
  const auto ranked = RetrieveTopK(model, mentions, table, depth);
  std::vector<std::vector<EntityId>> out(mentions.size());
  for (size_t i = 0; i < mentions.size(); ++i) {
    for (const auto& h : ranked[i]) {
      if (out[i].size() == top_n) break;
      if (h.id != mentions[i].gold_entity_id) out[i].push_back(h.id);
    }
  }
  return out;
}

HeldOut HoldOut(const std::vector<Mention>& mentions, double validation_fraction,
                uint64_t seed) {
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    Fail(ErrorKind::kConfig, "validation_fraction must be in [0, 1)");
  }
  std::vector<size_t> order(mentions.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  rng.Shuffle(order);
  const size_t n_val = static_cast<size_t>(
      std::floor(validation_fraction * static_cast<double>(mentions.size())));
  std::vector<bool> is_val(mentions.size(), false);
  for (size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
  HeldOut out;
  for (size_t i = 0; i < mentions.size(); ++i) {
    (is_val[i] ? out.validation : out.train).push_back(mentions[i]);
  }
  return out;
}

void BiEncoderTrainConfig::Validate() const {
  auto bad = [](const std::string& what) {
    Fail(ErrorKind::kConfig, "invalid bi-encoder training config: " + what);
  };
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) bad("learning_rate must be >= 0");
  if (hard_negative_refresh < 1) bad("hard_negative_refresh must be >= 1");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    bad("validation_fraction must be in [0, 1)");
  }
  if (validation_k < 1) bad("validation_k must be >= 1");
}

std::vector<std::vector<size_t>> UniqueGoldBatches(const std::vector<size_t>& order,
                                                   const std::vector<EntityId>& golds,
                                                   size_t batch_size) {
  std::vector<std::vector<size_t>> batches;
  std::vector<size_t> remaining = order;
  while (!remaining.empty()) {
    std::vector<size_t> batch;
    std::vector<size_t> leftover;
    std::unordered_set<EntityId> seen;
    for (size_t idx : remaining) {
      if (batch.size() < batch_size && seen.insert(golds[idx]).second) {
        batch.push_back(idx);
      } else {
        leftover.push_back(idx);
      }
    }
    batches.push_back(std::move(batch));
    remaining = std::move(leftover);
  }
  return batches;
}

BiEncoderTrainResult TrainBiEncoder(const ZeroShotSplit& split, BiEncoder model,
                                    const BiEncoderTrainConfig& config) {
  config.Validate();
  if (split.train_examples.empty()) Fail(ErrorKind::kData, "empty training set");
  if (split.train_kb.empty()) Fail(ErrorKind::kData, "empty training knowledge base");
  const KnowledgeBase& kb = split.train_kb;
  for (const auto& m : split.train_examples) {
    if (!kb.Contains(m.gold_entity_id)) {
      Fail(ErrorKind::kData, "training mention " + std::to_string(m.id) +
                                 " has gold outside the training KB");
    }
  }
  const HeldOut held = HoldOut(split.train_examples, config.validation_fraction, config.seed);
  const std::vector<Mention>& train = held.train;
  if (train.empty()) Fail(ErrorKind::kData, "no training mentions left after hold-out");

  const auto mention_inputs = MentionInputs(model, train);
  const auto entity_inputs = EntityInputs(model, kb.entities());
  std::vector<EntityId> golds(train.size());
  for (size_t i = 0; i < train.size(); ++i) golds[i] = train[i].gold_entity_id;

  const nn::AdamOptions adam{config.learning_rate};
  auto mention_params = nn::ParameterList(model.mention_encoder.weights);
  auto entity_params = nn::ParameterList(model.entity_encoder.weights);
  auto mention_state = nn::AdamState::For(mention_params, adam);
  auto entity_state = nn::AdamState::For(entity_params, adam);
  auto mention_grads = nn::GradientSet::Zeros(model.mention_encoder.config);
  auto entity_grads = nn::GradientSet::Zeros(model.entity_encoder.config);
  const auto mention_grad_list = nn::ParameterList(std::as_const(mention_grads.grads));
  const auto entity_grad_list = nn::ParameterList(std::as_const(entity_grads.grads));

  auto validation_recall = [&]() {
    if (held.validation.empty()) return 0.0;
    const auto table = BuildEmbeddingTable(model, kb);
    const size_t k = std::min(config.validation_k, table.size());
    return RecallOf(RetrieveTopK(model, held.validation, table, k), held.validation);
  };

  BiEncoderTrainResult result;
  result.log.push_back({0, 0.0, 0, validation_recall()});
  spdlog::info("bi-encoder epoch 0: validation recall@{} {:.4f}", config.validation_k,
               result.log.back().validation_recall);

  Rng rng(config.seed);
  Rng token_rng(config.seed ^ 0x5851f42d4c957f2dULL);
  const std::vector<TokenId> anonymous = config.anonymize_domain_tokens
                                             ? DomainSpecificTokens(split, *model.vocab)
                                             : std::vector<TokenId>{};
  std::vector<std::vector<EntityId>> negatives;
  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    if (config.hard_negatives > 0 && kb.size() >= 2 && epoch >= config.hard_negative_start &&
        (epoch - config.hard_negative_start) % config.hard_negative_refresh == 0) {
      const auto table = BuildEmbeddingTable(model, kb);
      negatives = MineHardNegatives(model, train, table, config.hard_negatives);
      spdlog::debug("bi-encoder epoch {}: mined {} hard negatives per example", epoch + 1,
                    negatives.empty() ? 0 : negatives[0].size());
    }
    if (config.anonymize_domain_tokens) {
      nn::RedrawTokenRows<float>({&model.mention_encoder, &model.entity_encoder}, anonymous,
                                 token_rng);
    }
    rng.Shuffle(order);
    const auto batches = UniqueGoldBatches(order, golds, config.batch_size);
    double loss_sum = 0.0;
    for (const auto& batch : batches) {
      const size_t b = batch.size();
      const size_t h = negatives.empty() ? 0 : negatives[batch[0]].size();
      std::vector<TokenSequence> m_in;
      std::vector<TokenSequence> e_in;
      m_in.reserve(b);
      e_in.reserve(b * (1 + h));
      for (size_t idx : batch) {
        m_in.push_back(mention_inputs[idx]);
        e_in.push_back(entity_inputs[*kb.Position(golds[idx])]);
      }
      for (size_t idx : batch) {
        for (size_t j = 0; j < h; ++j) {
          e_in.push_back(entity_inputs[*kb.Position(negatives[idx][j])]);
        }
      }
      nn::BatchTape<float> m_tape;
      nn::BatchTape<float> e_tape;
      const Matrix<float> ym =
          nn::EncodeClsForTraining(model.mention_encoder, std::span<const TokenSequence>(m_in), m_tape);
      const Matrix<float> ye =
          nn::EncodeClsForTraining(model.entity_encoder, std::span<const TokenSequence>(e_in), e_tape);
      const auto bi = static_cast<Eigen::Index>(b);
      const auto hi = static_cast<Eigen::Index>(h);
      const auto d = ym.cols();

      Matrix<float> scores(bi, bi + hi);
      scores.leftCols(bi) = ScorePairs<float>(ym, ye.topRows(bi));
      for (Eigen::Index i = 0; i < bi; ++i) {
        for (Eigen::Index j = 0; j < hi; ++j) {
          scores(i, bi + j) = ym.row(i).dot(ye.row(bi + i * hi + j));
        }
      }
      const auto loss = InBatchLoss<float>(scores);
      loss_sum += loss.loss;

      Matrix<float> d_ym = loss.grad.leftCols(bi) * ye.topRows(bi);
      Matrix<float> d_ye(ye.rows(), d);
      d_ye.topRows(bi) = loss.grad.leftCols(bi).transpose() * ym;
      for (Eigen::Index i = 0; i < bi; ++i) {
        for (Eigen::Index j = 0; j < hi; ++j) {
          const float g = loss.grad(i, bi + j);
          d_ym.row(i) += g * ye.row(bi + i * hi + j);
          d_ye.row(bi + i * hi + j) = g * ym.row(i);
        }
      }
      mention_grads.SetZero();
      entity_grads.SetZero();
      nn::EncoderBackward(model.mention_encoder, m_tape, d_ym, mention_grads);
      nn::EncoderBackward(model.entity_encoder, e_tape, d_ye, entity_grads);
      if (config.anonymize_domain_tokens) {
        nn::ZeroTokenRows(mention_grads, anonymous);
        nn::ZeroTokenRows(entity_grads, anonymous);
      }
      nn::AdamStep(mention_params, mention_grad_list, mention_state);
      nn::AdamStep(entity_params, entity_grad_list, entity_state);
    }
    BiEncoderEpochLog entry;
    entry.epoch = epoch + 1;
    entry.steps = batches.size();
    entry.loss = loss_sum / static_cast<double>(batches.size());
    entry.validation_recall = validation_recall();
    result.log.push_back(entry);
    spdlog::info("bi-encoder epoch {}: loss {:.4f}, validation recall@{} {:.4f}", entry.epoch,
                 entry.loss, config.validation_k, entry.validation_recall);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace linkstage
