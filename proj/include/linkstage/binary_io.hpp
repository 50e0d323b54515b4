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

// Little-endian binary helpers shared by the checkpoint, embedding-table and
// index file formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>

#include "linkstage/error.hpp"

namespace linkstage::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

inline void WriteBytes(std::ostream& out, const void* data, size_t size) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
}

inline void WriteMagic(std::ostream& out, std::string_view magic) {
  WriteBytes(out, magic.data(), magic.size());
}

template <typename T>
void WritePod(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  WriteBytes(out, &value, sizeof(T));
}

inline void WriteString(std::ostream& out, std::string_view s) {
  WritePod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  WriteBytes(out, s.data(), s.size());
}

inline void WriteFloats(std::ostream& out, std::span<const float> values) {
  WriteBytes(out, values.data(), values.size() * sizeof(float));
}

// LEB128 unsigned varint.
inline void WriteVarint(std::ostream& out, uint64_t value) {
  while (value >= 0x80) {
    out.put(static_cast<char>((value & 0x7f) | 0x80));
    value >>= 7;
  }
  out.put(static_cast<char>(value));
}

inline void ReadBytes(std::istream& in, void* data, size_t size,
                      ErrorKind kind) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(size));
  if (static_cast<size_t>(in.gcount()) != size) {
    Fail(kind, "unexpected end of file");
  }
}

inline void ExpectMagic(std::istream& in, std::string_view magic,
                        ErrorKind kind) {
  std::string buf(magic.size(), '\0');
  ReadBytes(in, buf.data(), buf.size(), kind);
  if (buf != magic) {
    Fail(kind, "bad magic bytes, expected \"" + std::string(magic) + "\"");
  }
}

template <typename T>
T ReadPod(std::istream& in, ErrorKind kind) {
  T value;
  ReadBytes(in, &value, sizeof(T), kind);
  return value;
}

inline std::string ReadString(std::istream& in, ErrorKind kind,
                              uint32_t max_len = 1u << 20) {
  const auto len = ReadPod<uint32_t>(in, kind);
  if (len > max_len) Fail(kind, "string length out of range");
  std::string s(len, '\0');
  ReadBytes(in, s.data(), len, kind);
  return s;
}

inline void ReadFloats(std::istream& in, std::span<float> values,
                       ErrorKind kind) {
  ReadBytes(in, values.data(), values.size() * sizeof(float), kind);
}

inline uint64_t ReadVarint(std::istream& in, ErrorKind kind) {
  uint64_t value = 0;
  for (int shift = 0; shift < 64; shift += 7) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) Fail(kind, "truncated varint");
    value |= static_cast<uint64_t>(c & 0x7f) << shift;
    if ((c & 0x80) == 0) return value;
  }
  Fail(kind, "varint too long");
}

// FNV-1a, 64-bit.
class Fingerprint {
 public:
  void Update(const void* data, size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < size; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  template <typename T>
  void UpdatePod(T value) {
    Update(&value, sizeof(T));
  }
  void Update(std::string_view s) { Update(s.data(), s.size()); }
  uint64_t value() const { return hash_; }

 private:
  uint64_t hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace linkstage::io
