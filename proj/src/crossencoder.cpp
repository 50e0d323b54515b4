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

#include "linkstage/crossencoder.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "linkstage/log.hpp"
#include "linkstage/random.hpp"

namespace linkstage {
namespace {

using nn::Matrix;

constexpr const char* kHeadTensor = "cross.w";
constexpr const char* kMaxLenTensor = "input.max_len";

std::vector<TokenSequence> CrossInputs(const CrossEncoder& model, const Mention& mention,
                                       const KnowledgeBase& kb,
                                       std::span<const EntityId> candidates) {
  std::vector<TokenSequence> inputs;
  inputs.reserve(candidates.size());
  for (EntityId id : candidates) {
    inputs.push_back(BuildCrossInput(mention, kb.ById(id), *model.vocab, model.max_len));
  }
  return inputs;
}

}  // namespace

CrossEncoder CrossEncoder::Init(nn::EncoderConfig config, std::shared_ptr<const Vocab> vocab,
                                size_t max_len) {
  if (!vocab) Fail(ErrorKind::kConfig, "cross-encoder needs a vocabulary");
  config.vocab_size = static_cast<uint32_t>(vocab->size());
  if (max_len > config.max_positions) {
    Fail(ErrorKind::kConfig, "cross max_len exceeds encoder max_positions");
  }
  CrossEncoder model;
  model.encoder = nn::EncoderModel::Init(config);
  model.w.resize(1, config.embed_dim);
  Rng rng(config.seed ^ 0xc2b2ae3d27d4eb4fULL);
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
  for (Eigen::Index j = 0; j < model.w.cols(); ++j) {
    model.w(0, j) = static_cast<float>(rng.UniformReal(-bound, bound));
  }
  model.vocab = std::move(vocab);
  model.max_len = max_len;
  return model;
}

void CrossEncoder::Save(const std::filesystem::path& dir, const std::string& prefix) const {
  std::filesystem::create_directories(dir);
  Matrix<float> len(1, 1);
  len(0, 0) = static_cast<float>(max_len);
  nn::SaveCheckpoint(dir / (prefix + ".ckpt"), encoder, {{kHeadTensor, w}, {kMaxLenTensor, len}});
  SaveVocab(*vocab, dir / (prefix + "_vocab.jsonl"));
}

CrossEncoder CrossEncoder::Load(const std::filesystem::path& dir, const std::string& prefix) {
  auto ckpt = nn::LoadCheckpoint(dir / (prefix + ".ckpt"));
  CrossEncoder model;
  model.encoder = std::move(ckpt.model);
  auto head = ckpt.extras.find(kHeadTensor);
  auto len = ckpt.extras.find(kMaxLenTensor);
  if (head == ckpt.extras.end() || len == ckpt.extras.end()) {
    Fail(ErrorKind::kModel, "cross-encoder checkpoint lacks its head or input length");
  }
  if (head->second.rows() != 1 ||
      head->second.cols() != static_cast<Eigen::Index>(model.encoder.config.embed_dim)) {
    Fail(ErrorKind::kModel, "cross.w does not match embed_dim");
  }
  model.w = head->second;
  model.max_len = static_cast<size_t>(len->second(0, 0));
  model.vocab = std::make_shared<const Vocab>(LoadVocab(dir / (prefix + "_vocab.jsonl")));
  if (model.vocab->size() != model.encoder.config.vocab_size) {
    Fail(ErrorKind::kModel, "vocabulary size does not match the checkpoint");
  }
  return model;
}

void CandidateSet::Validate() const {
  if (candidates.empty()) Fail(ErrorKind::kData, "empty candidate set");
  std::unordered_set<EntityId> seen;
  for (EntityId id : candidates) {
    if (!seen.insert(id).second) Fail(ErrorKind::kData, "duplicate candidate in set");
  }
  if (gold_position && *gold_position >= candidates.size()) {
    Fail(ErrorKind::kInternal, "gold position outside the candidate set");
  }
}

CandidateSet MakeCandidateSet(const Mention& mention, const SearchResult& retrieved, size_t k) {
  CandidateSet set;
  set.mention_id = mention.id;
  for (const auto& h : retrieved) {
    if (set.candidates.size() == k) break;
    if (h.id == mention.gold_entity_id) set.gold_position = set.candidates.size();
    set.candidates.push_back(h.id);
  }
  return set;
}

Matrix<float> ScoreCandidates(const CrossEncoder& model, const Mention& mention,
                              const KnowledgeBase& kb, std::span<const EntityId> candidates) {
  if (candidates.empty()) Fail(ErrorKind::kData, "empty candidate list");
  const auto inputs = CrossInputs(model, mention, kb, candidates);
  const Matrix<float> cls = nn::EncodeCls(model.encoder, std::span<const TokenSequence>(inputs));
  return model.w * cls.transpose();
}

size_t ArgMax(const Matrix<float>& logits) {
  if (logits.size() == 0) Fail(ErrorKind::kModel, "argmax of empty logits");
  size_t best = 0;
  for (Eigen::Index j = 1; j < logits.size(); ++j) {
    if (logits.data()[j] > logits.data()[best]) best = static_cast<size_t>(j);
  }
  return best;
}

void CrossEncoderTrainConfig::Validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    Fail(ErrorKind::kConfig, "cross-encoder learning_rate must be >= 0");
  }
  if (k < 1) Fail(ErrorKind::kConfig, "cross-encoder k must be >= 1");
}

CrossEncoderTrainResult TrainCrossEncoder(CrossEncoder model, const KnowledgeBase& kb,
                                          std::span<const Mention> mentions,
                                          std::span<const CandidateSet> candidates,
                                          const CrossEncoderTrainConfig& config,
                                          std::span<const TokenId> anonymous_tokens) {
  config.Validate();
  if (mentions.size() != candidates.size()) {
    Fail(ErrorKind::kInternal, "one candidate set per mention is required");
  }
  // Resolve the training lists once: truncate to k, then skip or insert.
  std::vector<size_t> usable;
  std::vector<std::vector<EntityId>> lists(mentions.size());
  std::vector<size_t> gold_at(mentions.size(), 0);
  for (size_t i = 0; i < mentions.size(); ++i) {
    candidates[i].Validate();
    auto& list = lists[i];
    list.assign(candidates[i].candidates.begin(),
                candidates[i].candidates.begin() +
                    static_cast<std::ptrdiff_t>(std::min(config.k, candidates[i].candidates.size())));
    auto it = std::find(list.begin(), list.end(), mentions[i].gold_entity_id);
    if (it == list.end()) {
      if (!config.insert_gold) continue;
      list.back() = mentions[i].gold_entity_id;
      it = list.end() - 1;
    }
    gold_at[i] = static_cast<size_t>(it - list.begin());
    usable.push_back(i);
  }
  if (usable.empty()) {
    Fail(ErrorKind::kData, "no training mention has its gold among the candidates");
  }
  const size_t skipped = mentions.size() - usable.size();

  const nn::AdamOptions adam{config.learning_rate};
  auto params = nn::ParameterList(model.encoder.weights);
  params.push_back(&model.w);
  auto grads = nn::GradientSet::Zeros(model.encoder.config);
  Matrix<float> d_w(1, model.w.cols());
  auto grad_list = nn::ParameterList(std::as_const(grads.grads));
  grad_list.push_back(&d_w);
  auto state = nn::AdamState::For(params, adam);

  CrossEncoderTrainResult result;
  Rng rng(config.seed);
  Rng token_rng(config.seed ^ 0x5851f42d4c957f2dULL);
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    nn::RedrawTokenRows<float>({&model.encoder}, anonymous_tokens, token_rng);
    rng.Shuffle(usable);
    double loss_sum = 0.0;
    for (size_t i : usable) {
      const auto inputs = CrossInputs(model, mentions[i], kb, lists[i]);
      nn::BatchTape<float> tape;
      const Matrix<float> cls =
          nn::EncodeClsForTraining(model.encoder, std::span<const TokenSequence>(inputs), tape);
      const Matrix<float> logits = model.w * cls.transpose();
      const auto loss = CandidateLoss<float>(logits, static_cast<Eigen::Index>(gold_at[i]));
      loss_sum += loss.loss;
      grads.SetZero();
      d_w = loss.grad * cls;
      const Matrix<float> d_cls = loss.grad.transpose() * model.w;
      nn::EncoderBackward(model.encoder, tape, d_cls, grads);
      nn::ZeroTokenRows(grads, anonymous_tokens);
      nn::AdamStep(params, grad_list, state);
    }
    CrossEncoderEpochLog entry{epoch + 1, loss_sum / static_cast<double>(usable.size()),
                               usable.size(), skipped};
    result.log.push_back(entry);
    spdlog::info("cross-encoder epoch {}: loss {:.4f} over {} mentions ({} skipped)",
                 entry.epoch, entry.loss, entry.steps, entry.skipped);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace linkstage
