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

#include "linkstage/text.hpp"

#include <algorithm>
#include <cctype>
#include <deque>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "linkstage/error.hpp"

namespace linkstage {

namespace {

const char* const kReservedNames[special::kCount] = {
    "[PAD]", "[CLS]", "[SEP]", "[UNK]", "[Ms]", "[Me]", "[ENT]"};

bool IsAsciiPunct(unsigned char c) { return c < 0x80 && std::ispunct(c); }
bool IsAsciiSpace(unsigned char c) { return c < 0x80 && std::isspace(c); }

}  // namespace

Vocab::Vocab() {
  for (const char* name : kReservedNames) Add(name);
}

void Vocab::Add(const std::string& token) {
  const auto id = static_cast<TokenId>(tokens_.size());
  if (!ids_.emplace(token, id).second) {
    Fail(ErrorKind::kData, "duplicate vocabulary token \"" + token + "\"");
  }
  tokens_.push_back(token);
}

Vocab Vocab::FromTokens(const std::vector<std::string>& tokens) {
  Vocab vocab;
  for (const auto& t : tokens) vocab.Add(t);
  return vocab;
}

TokenId Vocab::Lookup(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? special::kUnk : it->second;
}

std::vector<std::string> Tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (IsAsciiSpace(c)) {
      flush();
    } else if (IsAsciiPunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

Vocab BuildVocab(const ZeroShotSplit& split, size_t max_size) {
  if (max_size <= special::kCount) {
    Fail(ErrorKind::kConfig, "vocabulary max_size must exceed the 7 reserved tokens");
  }
  std::map<std::string, size_t> counts;
  auto count = [&](std::string_view text) {
    for (auto& t : Tokenize(text)) ++counts[t];
  };
  for (const KnowledgeBase* kb : {&split.train_kb, &split.test_kb}) {
    for (const Entity& e : kb->entities()) {
      count(e.title);
      count(e.description);
    }
  }
  for (const auto* mentions : {&split.train_examples, &split.test_examples}) {
    for (const Mention& m : *mentions) {
      count(m.context_left);
      count(m.surface);
      count(m.context_right);
    }
  }
  // Reserved names cannot be produced by Tokenize ("[" is punctuation), so
  // no corpus token collides with them.
  std::vector<std::pair<std::string, size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  const size_t keep = std::min(ranked.size(), max_size - special::kCount);
  tokens.reserve(keep);
  for (size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return Vocab::FromTokens(tokens);
}

std::vector<TokenId> DomainSpecificTokens(const ZeroShotSplit& split, const Vocab& vocab) {
  std::map<TokenId, std::set<std::string>> domains;
  auto note = [&](std::string_view text, const std::string& domain) {
    for (const auto& t : Tokenize(text)) {
      const TokenId id = vocab.Lookup(t);
      if (id >= special::kCount) domains[id].insert(domain);
    }
  };
  for (const KnowledgeBase* kb : {&split.train_kb, &split.test_kb}) {
    for (const Entity& e : kb->entities()) {
      note(e.title, e.domain);
      note(e.description, e.domain);
    }
  }
  for (const auto* mentions : {&split.train_examples, &split.test_examples}) {
    for (const Mention& m : *mentions) {
      note(m.context_left, m.domain);
      note(m.surface, m.domain);
      note(m.context_right, m.domain);
    }
  }
  std::vector<TokenId> out;
  for (const auto& [id, set] : domains) {
    if (set.size() == 1) out.push_back(id);
  }
  return out;
}

namespace {

std::vector<TokenId> Ids(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  for (const auto& t : Tokenize(text)) ids.push_back(vocab.Lookup(t));
  return ids;
}

// Mention template without padding. `budget` counts every emitted token.
std::vector<TokenId> MentionTokens(const Mention& m, const Vocab& vocab,
                                   size_t budget, bool* truncated) {
  std::deque<TokenId> left;
  for (TokenId id : Ids(m.context_left, vocab)) left.push_back(id);
  std::vector<TokenId> surface = Ids(m.surface, vocab);
  std::deque<TokenId> right;
  for (TokenId id : Ids(m.context_right, vocab)) right.push_back(id);

  const size_t inner = budget >= 4 ? budget - 4 : 0;
  if (surface.size() > inner) {
    surface.resize(inner);
    left.clear();
    right.clear();
    if (truncated != nullptr) *truncated = true;
  } else {
    // Drop from the far end of the longer context; the left side goes first
    // on ties.
    const size_t room = inner - surface.size();
    while (left.size() + right.size() > room) {
      if (left.size() >= right.size()) {
        left.pop_front();
      } else {
        right.pop_back();
      }
    }
  }
  std::vector<TokenId> out;
  out.reserve(budget);
  out.push_back(special::kCls);
  out.insert(out.end(), left.begin(), left.end());
  out.push_back(special::kMentionStart);
  out.insert(out.end(), surface.begin(), surface.end());
  out.push_back(special::kMentionEnd);
  out.insert(out.end(), right.begin(), right.end());
  out.push_back(special::kSep);
  return out;
}

std::vector<TokenId> EntityTokens(const Entity& e, const Vocab& vocab,
                                  size_t budget) {
  std::vector<TokenId> title = Ids(e.title, vocab);
  std::vector<TokenId> desc = Ids(e.description, vocab);
  const size_t inner = budget - 3;
  if (title.size() + desc.size() > inner) {
    if (title.size() >= inner) {
      desc.clear();
      title.resize(inner);
    } else {
      desc.resize(inner - title.size());
    }
  }
  std::vector<TokenId> out;
  out.reserve(budget);
  out.push_back(special::kCls);
  out.insert(out.end(), title.begin(), title.end());
  out.push_back(special::kEnt);
  out.insert(out.end(), desc.begin(), desc.end());
  out.push_back(special::kSep);
  return out;
}

TokenSequence Pad(std::vector<TokenId> ids, size_t max_len) {
  TokenSequence seq;
  seq.length = ids.size();
  ids.resize(max_len, special::kPad);
  seq.ids = std::move(ids);
  return seq;
}

}  // namespace

TokenSequence BuildMentionInput(const Mention& mention, const Vocab& vocab,
                                size_t max_len, bool* mention_truncated) {
  if (max_len < 5) Fail(ErrorKind::kConfig, "mention max_len must be >= 5");
  if (mention_truncated != nullptr) *mention_truncated = false;
  return Pad(MentionTokens(mention, vocab, max_len, mention_truncated), max_len);
}

TokenSequence BuildEntityInput(const Entity& entity, const Vocab& vocab,
                               size_t max_len) {
  if (max_len < 4) Fail(ErrorKind::kConfig, "entity max_len must be >= 4");
  return Pad(EntityTokens(entity, vocab, max_len), max_len);
}

TokenSequence BuildCrossInput(const Mention& mention, const Entity& entity,
                              const Vocab& vocab, size_t max_len) {
  if (max_len < 8) Fail(ErrorKind::kConfig, "cross max_len must be >= 8");
  const size_t mention_budget = (max_len + 1) / 2;
  const size_t entity_budget = max_len - mention_budget;
  std::vector<TokenId> ids = MentionTokens(mention, vocab, mention_budget, nullptr);
  // The entity template is built with one extra slot for the [CLS] that is
  // then removed.
  std::vector<TokenId> ent = EntityTokens(entity, vocab, entity_budget + 1);
  ids.insert(ids.end(), ent.begin() + 1, ent.end());
  return Pad(std::move(ids), max_len);
}

std::optional<std::string> CheckSequence(const TokenSequence& seq,
                                         size_t max_len) {
  if (seq.ids.size() > max_len) return "sequence longer than max_len";
  if (seq.length > seq.ids.size()) return "length exceeds padded size";
  if (seq.length == 0 || seq.ids[0] != special::kCls) {
    return "sequence does not start with [CLS]";
  }
  bool has_sep = false;
  for (size_t i = 0; i < seq.ids.size(); ++i) {
    const bool is_pad = seq.ids[i] == special::kPad;
    if (i < seq.length && is_pad) return "[PAD] before a real token";
    if (i >= seq.length && !is_pad) return "non-pad token after padding";
    if (seq.ids[i] == special::kSep) has_sep = true;
  }
  if (!has_sep) return "sequence has no [SEP]";
  return std::nullopt;
}

void SaveVocab(const Vocab& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kData, "cannot write " + path.string());
  for (size_t i = 0; i < vocab.size(); ++i) {
    out << nlohmann::json{{"token", vocab.Token(static_cast<TokenId>(i))},
                          {"id", i}}
               .dump()
        << '\n';
  }
}

Vocab LoadVocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) Fail(ErrorKind::kModel, "cannot open vocabulary " + path.string());
  std::vector<std::string> by_id;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    nlohmann::json r;
    try {
      r = nlohmann::json::parse(line);
      const auto id = r.at("id").get<size_t>();
      if (id != by_id.size()) Fail(ErrorKind::kData, where + ": ids must be dense and ordered");
      by_id.push_back(r.at("token").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorKind::kData, where + ": malformed vocabulary record: " + e.what());
    }
  }
  if (by_id.size() < special::kCount) {
    Fail(ErrorKind::kData, "vocabulary is missing reserved tokens");
  }
  for (TokenId i = 0; i < special::kCount; ++i) {
    if (by_id[i] != kReservedNames[i]) {
      Fail(ErrorKind::kData, "reserved token " + std::to_string(i) + " was reassigned");
    }
  }
  return Vocab::FromTokens({by_id.begin() + special::kCount, by_id.end()});
}

}  // namespace linkstage
