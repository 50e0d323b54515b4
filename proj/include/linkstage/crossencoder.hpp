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

// Joint scoring: y_{m,e} = cls(T_cross(cross input)), s(m, e) = y_{m,e} . w,
// trained with a softmax over the retrieved candidates of one mention.

#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "linkstage/ann.hpp"
#include "linkstage/corpus.hpp"
#include "linkstage/losses.hpp"
#include "linkstage/nn.hpp"
#include "linkstage/text.hpp"

namespace linkstage {

struct CrossEncoder {
  nn::EncoderModel encoder;
  nn::Matrix<float> w;  // 1 x d, no bias
  std::shared_ptr<const Vocab> vocab;
  size_t max_len = kDefaultCrossMaxLen;

  // w ~ U(-1/sqrt(d), 1/sqrt(d)) from the encoder seed.
  static CrossEncoder Init(nn::EncoderConfig config, std::shared_ptr<const Vocab> vocab,
                           size_t max_len = kDefaultCrossMaxLen);

  // Checkpoint (head stored as "cross.w") plus vocabulary in `dir`.
  void Save(const std::filesystem::path& dir, const std::string& prefix = "crossencoder") const;
  static CrossEncoder Load(const std::filesystem::path& dir,
                           const std::string& prefix = "crossencoder");
};

struct CandidateSet {
  int64_t mention_id = 0;
  std::vector<EntityId> candidates;       // retrieval order, no duplicates
  std::optional<size_t> gold_position;    // absent when gold was not retrieved

  // Throws on duplicates or an empty list.
  void Validate() const;
};

// Candidates in retrieval order, truncated to k.
CandidateSet MakeCandidateSet(const Mention& mention, const SearchResult& retrieved, size_t k);

// logit j = w . cls(cross input of (mention, candidates[j])).
nn::Matrix<float> ScoreCandidates(const CrossEncoder& model, const Mention& mention,
                                  const KnowledgeBase& kb,
                                  std::span<const EntityId> candidates);

// -logit[gold] + logsumexp(logits); gradient softmax - onehot.
template <typename Scalar>
LossAndGrad<Scalar> CandidateLoss(const nn::Matrix<Scalar>& logits, Eigen::Index gold) {
  if (logits.size() == 0) Fail(ErrorKind::kModel, "empty candidate logits");
  if (gold < 0 || gold >= logits.size()) Fail(ErrorKind::kData, "gold absent from candidates");
  return SoftmaxCrossEntropy(logits, gold);
}

// Position of the highest logit; ties go to the earlier candidate.
size_t ArgMax(const nn::Matrix<float>& logits);

struct CrossEncoderTrainConfig {
  size_t epochs = 3;
  double learning_rate = 1e-3;
  uint64_t seed = 1;
  size_t k = 64;             // candidates per mention used for training
  bool insert_gold = false;  // otherwise gold-absent mentions are skipped

  void Validate() const;
};

struct CrossEncoderEpochLog {
  size_t epoch = 0;
  double loss = 0.0;
  size_t steps = 0;
  size_t skipped = 0;
};

struct CrossEncoderTrainResult {
  CrossEncoder model;
  std::vector<CrossEncoderEpochLog> log;
};

// One mention (with its whole candidate set) per step. candidates[i]
// belongs to mentions[i]. Throws when no mention is trainable. Embedding rows
// of `anonymous_tokens` are frozen and redrawn before every epoch (see
// DomainSpecificTokens).
CrossEncoderTrainResult TrainCrossEncoder(CrossEncoder model, const KnowledgeBase& kb,
                                          std::span<const Mention> mentions,
                                          std::span<const CandidateSet> candidates,
                                          const CrossEncoderTrainConfig& config,
                                          std::span<const TokenId> anonymous_tokens = {});

}  // namespace linkstage
