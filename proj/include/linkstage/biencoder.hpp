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

// Dual-tower retrieval: y_m = cls(T_mention(mention input)),
// y_e = cls(T_entity(entity input)), s(m, e) = y_m . y_e, trained with an
// in-batch softmax plus mined hard negatives.

#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "linkstage/ann.hpp"
#include "linkstage/corpus.hpp"
#include "linkstage/embedding_table.hpp"
#include "linkstage/losses.hpp"
#include "linkstage/nn.hpp"
#include "linkstage/text.hpp"

namespace linkstage {

struct BiEncoder {
  nn::EncoderModel mention_encoder;
  nn::EncoderModel entity_encoder;
  std::shared_ptr<const Vocab> vocab;
  size_t mention_max_len = kDefaultBiMaxLen;
  size_t entity_max_len = kDefaultBiMaxLen;

  // Both towers start from the same seeded parameters and are trained
  // independently afterwards.
  static BiEncoder Init(nn::EncoderConfig config, std::shared_ptr<const Vocab> vocab,
                        size_t mention_max_len = kDefaultBiMaxLen,
                        size_t entity_max_len = kDefaultBiMaxLen);

  // Two checkpoint files plus the vocabulary in `dir`.
  void Save(const std::filesystem::path& dir, const std::string& prefix = "biencoder") const;
  static BiEncoder Load(const std::filesystem::path& dir, const std::string& prefix = "biencoder");
};

std::vector<TokenSequence> MentionInputs(const BiEncoder& model,
                                         std::span<const Mention> mentions);
std::vector<TokenSequence> EntityInputs(const BiEncoder& model,
                                        std::span<const Entity> entities);

// Unnormalized CLS vectors, one row per input.
EmbeddingMatrix EmbedMentions(const BiEncoder& model, std::span<const Mention> mentions);
EmbeddingMatrix EmbedEntities(const BiEncoder& model, std::span<const Entity> entities);

// scores(i, j) = mentions.row(i) . entities.row(j)
template <typename Scalar>
nn::Matrix<Scalar> ScorePairs(const nn::Matrix<Scalar>& mentions,
                              const nn::Matrix<Scalar>& entities) {
  if (mentions.cols() != entities.cols()) {
    Fail(ErrorKind::kModel, "score_pairs dimension mismatch");
  }
  return mentions * entities.transpose();
}

// Mean over rows of -s(i, i) + log sum_j exp s(i, j), where column i is the
// gold of row i and every column of the row enters the sum (in-batch golds
// of other rows plus that row's hard negatives). grad = (softmax - onehot)/B.
template <typename Scalar>
LossAndGrad<Scalar> InBatchLoss(const nn::Matrix<Scalar>& scores) {
  const Eigen::Index b = scores.rows();
  if (b == 0 || scores.cols() < b) {
    Fail(ErrorKind::kInternal, "in-batch scores must be B x (B + H)");
  }
  if (!scores.allFinite()) Fail(ErrorKind::kModel, "non-finite scores");
  LossAndGrad<Scalar> out;
  out.grad.resize(b, scores.cols());
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto row = SoftmaxCrossEntropy(scores.row(i), i);
    out.loss += row.loss;
    out.grad.row(i) = row.grad;
  }
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(b);
  out.loss *= inv_b;
  out.grad *= inv_b;
  return out;
}

// Cached y_e for every KB entity, in KB order.
EntityEmbeddingTable BuildEmbeddingTable(const BiEncoder& model, const KnowledgeBase& kb);

// For each mention, the top_n highest-scoring table entities other than its
// gold, ties broken by lower entity id. Requires >= 2 entities.
std::vector<std::vector<EntityId>> MineHardNegatives(const BiEncoder& model,
                                                     std::span<const Mention> mentions,
                                                     const EntityEmbeddingTable& table,
                                                     size_t top_n);

// Per-mention exact top-k over `table`.
std::vector<SearchResult> RetrieveTopK(const BiEncoder& model,
                                       std::span<const Mention> mentions,
                                       const EntityEmbeddingTable& table, size_t k);

// Deterministic train/validation partition of mentions.
struct HeldOut {
  std::vector<Mention> train;
  std::vector<Mention> validation;
};
HeldOut HoldOut(const std::vector<Mention>& mentions, double validation_fraction,
                uint64_t seed);

struct BiEncoderTrainConfig {
  size_t epochs = 10;
  size_t batch_size = 32;
  double learning_rate = 1e-3;
  uint64_t seed = 1;
  size_t hard_negatives = 10;          // H; 0 disables mining
  size_t hard_negative_start = 1;      // first epoch (0-based) that uses them
  size_t hard_negative_refresh = 2;    // re-mine every this many epochs
  double validation_fraction = 0.1;    // of training mentions
  size_t validation_k = 64;
  // Rows of domain-specific tokens are frozen and redrawn, identically in
  // both towers, before every epoch. The towers then have to match such
  // tokens by identity instead of memorizing training-world names, which is
  // what lets them handle the unseen names of a new world.
  bool anonymize_domain_tokens = true;

  void Validate() const;
};

struct BiEncoderEpochLog {
  size_t epoch = 0;  // 0 is the untrained model
  double loss = 0.0;
  size_t steps = 0;
  double validation_recall = 0.0;  // Recall@validation_k on held-out mentions
};

struct BiEncoderTrainResult {
  BiEncoder model;
  std::vector<BiEncoderEpochLog> log;
};

// Trains `model` in place on split.train_examples against split.train_kb.
BiEncoderTrainResult TrainBiEncoder(const ZeroShotSplit& split, BiEncoder model,
                                    const BiEncoderTrainConfig& config);

// Batches of example indices in which no gold entity repeats, so every
// off-diagonal in-batch column is a true negative.
std::vector<std::vector<size_t>> UniqueGoldBatches(const std::vector<size_t>& order,
                                                   const std::vector<EntityId>& golds,
                                                   size_t batch_size);

}  // namespace linkstage
