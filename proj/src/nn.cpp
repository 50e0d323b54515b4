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

#include "linkstage/nn.hpp"

#include <fstream>

#include "linkstage/binary_io.hpp"

namespace linkstage::nn {

namespace {

void WriteConfig(std::ostream& out, const EncoderConfig& c) {
  io::WritePod(out, c.vocab_size);
  io::WritePod(out, c.embed_dim);
  io::WritePod(out, c.n_layers);
  io::WritePod(out, c.n_heads);
  io::WritePod(out, c.ff_dim);
  io::WritePod(out, c.max_positions);
  io::WritePod(out, c.seed);
}

EncoderConfig ReadConfig(std::istream& in) {
  constexpr auto k = ErrorKind::kModel;
  EncoderConfig c;
  c.vocab_size = io::ReadPod<uint32_t>(in, k);
  c.embed_dim = io::ReadPod<uint32_t>(in, k);
  c.n_layers = io::ReadPod<uint32_t>(in, k);
  c.n_heads = io::ReadPod<uint32_t>(in, k);
  c.ff_dim = io::ReadPod<uint32_t>(in, k);
  c.max_positions = io::ReadPod<uint32_t>(in, k);
  c.seed = io::ReadPod<uint64_t>(in, k);
  c.Validate();
  return c;
}

void WriteTensor(std::ostream& out, const std::string& name, const Matrix<float>& m) {
  io::WriteString(out, name);
  io::WritePod<uint32_t>(out, 2);
  io::WritePod<uint32_t>(out, static_cast<uint32_t>(m.rows()));
  io::WritePod<uint32_t>(out, static_cast<uint32_t>(m.cols()));
  io::WriteFloats(out, {m.data(), static_cast<size_t>(m.size())});
}

}  // namespace

void SaveCheckpoint(const std::filesystem::path& path, const EncoderModel& model,
                    const std::map<std::string, Matrix<float>>& extras) {
  std::ofstream out(path, std::ios::binary);
  if (!out) Fail(ErrorKind::kModel, "cannot write checkpoint " + path.string());
  io::WriteMagic(out, "BLNK");
  io::WritePod(out, kCheckpointVersion);
  WriteConfig(out, model.config);
  size_t count = extras.size();
  model.weights.Visit([&](const std::string&, const Matrix<float>&) { ++count; });
  io::WritePod<uint32_t>(out, static_cast<uint32_t>(count));
  model.weights.Visit([&](const std::string& name, const Matrix<float>& m) {
    WriteTensor(out, name, m);
  });
  for (const auto& [name, m] : extras) WriteTensor(out, name, m);
  if (!out) Fail(ErrorKind::kModel, "failed writing checkpoint " + path.string());
}

Checkpoint LoadCheckpoint(const std::filesystem::path& path) {
  constexpr auto k = ErrorKind::kModel;
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(k, "checkpoint not found: " + path.string());
  io::ExpectMagic(in, "BLNK", k);
  const auto version = io::ReadPod<uint32_t>(in, k);
  if (version != kCheckpointVersion) {
    Fail(k, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.model.config = ReadConfig(in);
  ckpt.model.weights = EncoderWeights<float>::Zeros(ckpt.model.config);
  std::map<std::string, Matrix<float>*> slots;
  ckpt.model.weights.Visit(
      [&](const std::string& name, Matrix<float>& m) { slots[name] = &m; });
  const auto count = io::ReadPod<uint32_t>(in, k);
  size_t filled = 0;
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = io::ReadString(in, k, 1024);
    const auto rank = io::ReadPod<uint32_t>(in, k);
    if (rank != 2) Fail(k, "tensor " + name + " has unsupported rank");
    const auto rows = io::ReadPod<uint32_t>(in, k);
    const auto cols = io::ReadPod<uint32_t>(in, k);
    auto it = slots.find(name);
    Matrix<float>* target = nullptr;
    if (it != slots.end()) {
      target = it->second;
      if (target->rows() != rows || target->cols() != cols) {
        Fail(k, "tensor " + name + " shape does not match config");
      }
      ++filled;
    } else {
      if (static_cast<uint64_t>(rows) * cols > (1ULL << 28)) Fail(k, "tensor too large");
      target = &ckpt.extras[name];
      target->resize(rows, cols);
    }
    io::ReadFloats(in, {target->data(), static_cast<size_t>(target->size())}, k);
  }
  if (filled != slots.size()) Fail(k, "checkpoint is missing encoder tensors");
  return ckpt;
}

uint64_t ModelFingerprint(const EncoderModel& model) {
  io::Fingerprint fp;
  const auto& c = model.config;
  for (uint32_t v : {c.vocab_size, c.embed_dim, c.n_layers, c.n_heads, c.ff_dim,
                     c.max_positions}) {
    fp.UpdatePod(v);
  }
  model.weights.Visit([&](const std::string& name, const Matrix<float>& m) {
    fp.Update(name);
    fp.Update(m.data(), static_cast<size_t>(m.size()) * sizeof(float));
  });
  return fp.value();
}

}  // namespace linkstage::nn
