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

// Tokenizer, vocabulary and the three encoder input templates:
//
//   mention:  [CLS] ctxt_l [Ms] mention [Me] ctxt_r [SEP]
//   entity:   [CLS] title [ENT] description [SEP]
//   cross:    mention template + entity template without its [CLS]

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "linkstage/corpus.hpp"

namespace linkstage {

using TokenId = int32_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kCls = 1;
inline constexpr TokenId kSep = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kMentionStart = 4;
inline constexpr TokenId kMentionEnd = 5;
inline constexpr TokenId kEnt = 6;
inline constexpr TokenId kCount = 7;
}  // namespace special

inline constexpr size_t kDefaultBiMaxLen = 32;
inline constexpr size_t kDefaultCrossMaxLen = 64;

class Vocab {
 public:
  // Only the reserved tokens.
  Vocab();

  // Reserved tokens followed by `tokens` in order. Throws on duplicates or
  // when a token collides with a reserved name.
  static Vocab FromTokens(const std::vector<std::string>& tokens);

  size_t size() const { return tokens_.size(); }
  TokenId Lookup(std::string_view token) const;  // [UNK] when absent
  const std::string& Token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void Add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Padded token ids. Positions [0, length) are real tokens; the rest are
// [PAD] and are masked out of attention.
struct TokenSequence {
  std::vector<TokenId> ids;
  size_t length = 0;

  size_t padded_length() const { return ids.size(); }
  bool operator==(const TokenSequence&) const = default;
};

// Lowercases, splits on whitespace, and emits each ASCII punctuation
// character as its own token.
std::vector<std::string> Tokenize(std::string_view text);

// Reserved tokens first, then corpus tokens (both split sides, entity and
// mention text) by descending frequency, ties in lexicographic order, up to
// max_size entries. Requires max_size > 7.
Vocab BuildVocab(const ZeroShotSplit& split, size_t max_size);

// Vocabulary ids of tokens that occur in the text of exactly one domain
// (entity titles, descriptions and mention text of both split sides),
// ascending. These behave like names: nothing learned about them in one
// world carries over to another.
std::vector<TokenId> DomainSpecificTokens(const ZeroShotSplit& split, const Vocab& vocab);

// Requires max_len >= 5. When the mention alone does not fit, sets
// *mention_truncated (if given) and keeps the head of the mention.
TokenSequence BuildMentionInput(const Mention& mention, const Vocab& vocab,
                                size_t max_len = kDefaultBiMaxLen,
                                bool* mention_truncated = nullptr);

// Requires max_len >= 4.
TokenSequence BuildEntityInput(const Entity& entity, const Vocab& vocab,
                               size_t max_len = kDefaultBiMaxLen);

// Requires max_len >= 8. The mention part gets ceil(max_len / 2) positions,
// the entity part the remainder.
TokenSequence BuildCrossInput(const Mention& mention, const Entity& entity,
                              const Vocab& vocab,
                              size_t max_len = kDefaultCrossMaxLen);

// Returns a description of the first violated sequence invariant, if any.
std::optional<std::string> CheckSequence(const TokenSequence& seq,
                                         size_t max_len);

void SaveVocab(const Vocab& vocab, const std::filesystem::path& path);
Vocab LoadVocab(const std::filesystem::path& path);

}  // namespace linkstage
