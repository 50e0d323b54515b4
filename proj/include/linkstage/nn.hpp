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

// A small pre-layer-norm transformer encoder with hand-written backward
// pass, CLS pooling and Adam. Everything is templated on the scalar type:
// training runs in float, and a double instantiation of the same code serves
// as the high-precision side of finite-difference gradient checks.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "linkstage/error.hpp"
#include "linkstage/parallel.hpp"
#include "linkstage/random.hpp"
#include "linkstage/text.hpp"

namespace linkstage::nn {

template <typename Scalar>
using Matrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct EncoderConfig {
  uint32_t vocab_size = 0;
  uint32_t embed_dim = 64;
  uint32_t n_layers = 2;
  uint32_t n_heads = 4;
  uint32_t ff_dim = 128;
  uint32_t max_positions = 64;
  uint64_t seed = 1;

  void Validate() const {
    auto bad = [](const std::string& what) {
      Fail(ErrorKind::kConfig, "invalid encoder config: " + what);
    };
    if (vocab_size < 1 || embed_dim < 1 || n_layers < 1 || n_heads < 1 ||
        ff_dim < 1 || max_positions < 1) {
      bad("all counts must be >= 1");
    }
    if (embed_dim % n_heads != 0) bad("embed_dim must be divisible by n_heads");
  }
  uint32_t head_dim() const { return embed_dim / n_heads; }

  bool operator==(const EncoderConfig&) const = default;
};

template <typename Scalar>
struct LayerWeights {
  Matrix<Scalar> ln1_gain, ln1_bias;
  Matrix<Scalar> query, query_bias;
  Matrix<Scalar> key, key_bias;
  Matrix<Scalar> value, value_bias;
  Matrix<Scalar> output, output_bias;
  Matrix<Scalar> ln2_gain, ln2_bias;
  Matrix<Scalar> ff_in, ff_in_bias;
  Matrix<Scalar> ff_out, ff_out_bias;

  template <typename Self, typename Fn>
  static void Visit(Self& self, const std::string& prefix, Fn& fn) {
    fn(prefix + "ln1.gain", self.ln1_gain);
    fn(prefix + "ln1.bias", self.ln1_bias);
    fn(prefix + "attn.query", self.query);
    fn(prefix + "attn.query_bias", self.query_bias);
    fn(prefix + "attn.key", self.key);
    fn(prefix + "attn.key_bias", self.key_bias);
    fn(prefix + "attn.value", self.value);
    fn(prefix + "attn.value_bias", self.value_bias);
    fn(prefix + "attn.output", self.output);
    fn(prefix + "attn.output_bias", self.output_bias);
    fn(prefix + "ln2.gain", self.ln2_gain);
    fn(prefix + "ln2.bias", self.ln2_bias);
    fn(prefix + "ff.in", self.ff_in);
    fn(prefix + "ff.in_bias", self.ff_in_bias);
    fn(prefix + "ff.out", self.ff_out);
    fn(prefix + "ff.out_bias", self.ff_out_bias);
  }
};

// All trainable tensors of one encoder. Biases and gains are 1 x n.
template <typename Scalar>
struct EncoderWeights {
  Matrix<Scalar> token_embedding;     // vocab_size x d
  Matrix<Scalar> position_embedding;  // max_positions x d
  std::vector<LayerWeights<Scalar>> layers;
  Matrix<Scalar> final_ln_gain, final_ln_bias;

  // fn(name, tensor) over every tensor in a fixed order.
  template <typename Fn>
  void Visit(Fn&& fn) {
    VisitImpl(*this, fn);
  }
  template <typename Fn>
  void Visit(Fn&& fn) const {
    VisitImpl(*this, fn);
  }

  static EncoderWeights Zeros(const EncoderConfig& c) {
    const Eigen::Index d = c.embed_dim, ff = c.ff_dim;
    EncoderWeights w;
    w.token_embedding = Matrix<Scalar>::Zero(c.vocab_size, d);
    w.position_embedding = Matrix<Scalar>::Zero(c.max_positions, d);
    w.layers.resize(c.n_layers);
    for (auto& l : w.layers) {
      l.ln1_gain = l.ln1_bias = l.ln2_gain = l.ln2_bias = Matrix<Scalar>::Zero(1, d);
      l.query = l.key = l.value = l.output = Matrix<Scalar>::Zero(d, d);
      l.query_bias = l.key_bias = l.value_bias = l.output_bias =
          Matrix<Scalar>::Zero(1, d);
      l.ff_in = Matrix<Scalar>::Zero(d, ff);
      l.ff_in_bias = Matrix<Scalar>::Zero(1, ff);
      l.ff_out = Matrix<Scalar>::Zero(ff, d);
      l.ff_out_bias = Matrix<Scalar>::Zero(1, d);
    }
    w.final_ln_gain = w.final_ln_bias = Matrix<Scalar>::Zero(1, d);
    return w;
  }

  size_t ParameterCount() const {
    size_t n = 0;
    Visit([&](const std::string&, const Matrix<Scalar>& m) { n += m.size(); });
    return n;
  }

  void SetZero() {
    Visit([](const std::string&, Matrix<Scalar>& m) { m.setZero(); });
  }

  template <typename To>
  EncoderWeights<To> Cast() const {
    EncoderWeights<To> out = EncoderWeights<To>::ZerosLike(*this);
    std::vector<const Matrix<Scalar>*> src;
    Visit([&](const std::string&, const Matrix<Scalar>& m) { src.push_back(&m); });
    size_t i = 0;
    out.Visit([&](const std::string&, Matrix<To>& m) {
      m = src[i++]->template cast<To>();
    });
    return out;
  }

  template <typename From>
  static EncoderWeights ZerosLike(const EncoderWeights<From>& other) {
    EncoderWeights w;
    w.layers.resize(other.layers.size());
    return w;
  }

 private:
  template <typename Self, typename Fn>
  static void VisitImpl(Self& self, Fn& fn) {
    fn(std::string("token_embedding"), self.token_embedding);
    fn(std::string("position_embedding"), self.position_embedding);
    for (size_t i = 0; i < self.layers.size(); ++i) {
      LayerWeights<Scalar>::Visit(self.layers[i],
                                  "layers." + std::to_string(i) + ".", fn);
    }
    fn(std::string("final_ln.gain"), self.final_ln_gain);
    fn(std::string("final_ln.bias"), self.final_ln_bias);
  }
};

template <typename Scalar>
struct BasicEncoderModel {
  EncoderConfig config;
  EncoderWeights<Scalar> weights;

  // Embeddings ~ U(-0.05, 0.05); projections ~ U(-1/sqrt(fan_in),
  // 1/sqrt(fan_in)); biases 0; layer-norm gains 1. Seeded by config.seed.
  static BasicEncoderModel Init(const EncoderConfig& config) {
    config.Validate();
    BasicEncoderModel model;
    model.config = config;
    model.weights = EncoderWeights<Scalar>::Zeros(config);
    Rng rng(config.seed);
    auto uniform = [&](Matrix<Scalar>& m, double bound) {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<Scalar>(rng.UniformReal(-bound, bound));
      }
    };
    auto& w = model.weights;
    uniform(w.token_embedding, 0.05);
    uniform(w.position_embedding, 0.05);
    const double proj = 1.0 / std::sqrt(static_cast<double>(config.embed_dim));
    const double ff_proj = 1.0 / std::sqrt(static_cast<double>(config.ff_dim));
    for (auto& l : w.layers) {
      l.ln1_gain.setOnes();
      l.ln2_gain.setOnes();
      uniform(l.query, proj);
      uniform(l.key, proj);
      uniform(l.value, proj);
      uniform(l.output, proj);
      uniform(l.ff_in, proj);
      uniform(l.ff_out, ff_proj);
    }
    w.final_ln_gain.setOnes();
    return model;
  }

  template <typename To>
  BasicEncoderModel<To> Cast() const {
    return {config, weights.template Cast<To>()};
  }
};

template <typename Scalar>
struct BasicGradientSet {
  EncoderWeights<Scalar> grads;

  static BasicGradientSet Zeros(const EncoderConfig& config) {
    return {EncoderWeights<Scalar>::Zeros(config)};
  }
  void SetZero() { grads.SetZero(); }

  void Add(const BasicGradientSet& other) {
    std::vector<const Matrix<Scalar>*> src;
    other.grads.Visit(
        [&](const std::string&, const Matrix<Scalar>& m) { src.push_back(&m); });
    size_t i = 0;
    grads.Visit([&](const std::string&, Matrix<Scalar>& m) { m += *src[i++]; });
  }
  void Scale(Scalar s) {
    grads.Visit([&](const std::string&, Matrix<Scalar>& m) { m *= s; });
  }
  bool AllFinite() const {
    bool ok = true;
    grads.Visit([&](const std::string&, const Matrix<Scalar>& m) {
      ok = ok && m.allFinite();
    });
    return ok;
  }
};

using EncoderModel = BasicEncoderModel<float>;
using GradientSet = BasicGradientSet<float>;

// ---------------------------------------------------------------------------
// Forward / backward

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;  // x_hat
  Vector<Scalar> inv_std;
};

template <typename Scalar>
Matrix<Scalar> LayerNormForward(const Matrix<Scalar>& x,
                                const Matrix<Scalar>& gain,
                                const Matrix<Scalar>& bias,
                                LayerNormCache<Scalar>* cache) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  Matrix<Scalar> hat(rows, d);
  Vector<Scalar> inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Scalar mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).matrix();
    const Scalar var = centered.squaredNorm() / static_cast<Scalar>(d);
    inv_std(r) = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kLayerNormEps));
    hat.row(r) = centered * inv_std(r);
  }
  Matrix<Scalar> y =
      (hat.array().rowwise() * gain.row(0).array()).rowwise() +
      bias.row(0).array();
  if (cache != nullptr) {
    cache->normalized = std::move(hat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

// Returns dL/dx and accumulates gain/bias gradients.
template <typename Scalar>
Matrix<Scalar> LayerNormBackward(const Matrix<Scalar>& dy,
                                 const Matrix<Scalar>& gain,
                                 const LayerNormCache<Scalar>& cache,
                                 Matrix<Scalar>& d_gain,
                                 Matrix<Scalar>& d_bias) {
  const auto& hat = cache.normalized;
  d_gain.row(0) += (dy.array() * hat.array()).colwise().sum().matrix();
  d_bias.row(0) += dy.colwise().sum();
  const Matrix<Scalar> dhat = (dy.array().rowwise() * gain.row(0).array()).matrix();
  const Scalar inv_d = Scalar(1) / static_cast<Scalar>(dy.cols());
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const Scalar mean_dhat = dhat.row(r).sum() * inv_d;
    const Scalar mean_dhat_hat = dhat.row(r).dot(hat.row(r)) * inv_d;
    dx.row(r) = ((dhat.row(r).array() - mean_dhat) -
                 hat.row(r).array() * mean_dhat_hat) *
                cache.inv_std(r);
  }
  return dx;
}

// tanh approximation of GELU.
template <typename Scalar>
Scalar Gelu(Scalar u) {
  constexpr double c = 0.7978845608028654;  // sqrt(2 / pi)
  const Scalar t = std::tanh(static_cast<Scalar>(c) *
                             (u + static_cast<Scalar>(0.044715) * u * u * u));
  return Scalar(0.5) * u * (Scalar(1) + t);
}

template <typename Scalar>
Scalar GeluGrad(Scalar u) {
  constexpr double c = 0.7978845608028654;
  const Scalar inner =
      static_cast<Scalar>(c) * (u + static_cast<Scalar>(0.044715) * u * u * u);
  const Scalar t = std::tanh(inner);
  const Scalar dinner =
      static_cast<Scalar>(c) * (Scalar(1) + static_cast<Scalar>(3 * 0.044715) * u * u);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * u * (Scalar(1) - t * t) * dinner;
}

template <typename Scalar>
void AddRowBias(Matrix<Scalar>& m, const Matrix<Scalar>& bias) {
  m.rowwise() += bias.row(0);
}

}  // namespace detail

// Activations of one layer for one sequence. `rows` is the number of query
// positions carried forward; it is 1 in the last layer when only the CLS
// output is needed.
template <typename Scalar>
struct LayerTape {
  Matrix<Scalar> input;  // L x d
  detail::LayerNormCache<Scalar> ln1;
  Matrix<Scalar> h1;       // L x d
  Matrix<Scalar> q;        // rows x d
  Matrix<Scalar> k, v;     // L x d
  std::vector<Matrix<Scalar>> probs;  // per head, rows x L
  Matrix<Scalar> attn;     // rows x d
  detail::LayerNormCache<Scalar> ln2;
  Matrix<Scalar> h2;       // rows x d
  Matrix<Scalar> ff_pre;   // rows x ff
  Matrix<Scalar> ff_act;   // rows x ff
};

template <typename Scalar>
struct SequenceTape {
  std::vector<TokenId> ids;  // unpadded prefix
  std::vector<LayerTape<Scalar>> layers;
  detail::LayerNormCache<Scalar> final_ln;
  Matrix<Scalar> hidden;  // final hidden states, rows x d
};

// Runs one unpadded sequence. With cls_only, the last layer computes only the
// position-0 query, which yields the same CLS vector at lower cost.
template <typename Scalar>
SequenceTape<Scalar> ForwardSequence(const BasicEncoderModel<Scalar>& model,
                                     std::span<const TokenId> ids,
                                     bool cls_only) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  const Eigen::Index L = static_cast<Eigen::Index>(ids.size());
  const Eigen::Index d = cfg.embed_dim;
  const Eigen::Index dh = cfg.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  SequenceTape<Scalar> tape;
  tape.ids.assign(ids.begin(), ids.end());
  Matrix<Scalar> x(L, d);
  for (Eigen::Index i = 0; i < L; ++i) {
    x.row(i) = w.token_embedding.row(ids[i]) + w.position_embedding.row(i);
  }
  tape.layers.resize(cfg.n_layers);
  for (uint32_t li = 0; li < cfg.n_layers; ++li) {
    const auto& lw = w.layers[li];
    auto& lt = tape.layers[li];
    const Eigen::Index rows = (cls_only && li + 1 == cfg.n_layers) ? 1 : L;
    lt.input = std::move(x);
    lt.h1 = detail::LayerNormForward(lt.input, lw.ln1_gain, lw.ln1_bias, &lt.ln1);
    lt.q = lt.h1.topRows(rows) * lw.query;
    detail::AddRowBias(lt.q, lw.query_bias);
    lt.k = lt.h1 * lw.key;
    detail::AddRowBias(lt.k, lw.key_bias);
    lt.v = lt.h1 * lw.value;
    detail::AddRowBias(lt.v, lw.value_bias);
    lt.attn.resize(rows, d);
    lt.probs.resize(cfg.n_heads);
    for (uint32_t h = 0; h < cfg.n_heads; ++h) {
      const Eigen::Index c0 = h * dh;
      Matrix<Scalar> s = (lt.q.middleCols(c0, dh) * lt.k.middleCols(c0, dh).transpose()) * scale;
      for (Eigen::Index r = 0; r < rows; ++r) {
        const Scalar mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp().matrix();
        s.row(r) /= s.row(r).sum();
      }
      lt.attn.middleCols(c0, dh) = s * lt.v.middleCols(c0, dh);
      lt.probs[h] = std::move(s);
    }
    Matrix<Scalar> mid = lt.input.topRows(rows) + lt.attn * lw.output;
    detail::AddRowBias(mid, lw.output_bias);
    lt.h2 = detail::LayerNormForward(mid, lw.ln2_gain, lw.ln2_bias, &lt.ln2);
    lt.ff_pre = lt.h2 * lw.ff_in;
    detail::AddRowBias(lt.ff_pre, lw.ff_in_bias);
    lt.ff_act = lt.ff_pre.unaryExpr([](Scalar u) { return detail::Gelu(u); });
    x = mid + lt.ff_act * lw.ff_out;
    detail::AddRowBias(x, lw.ff_out_bias);
  }
  tape.hidden = detail::LayerNormForward(x, w.final_ln_gain, w.final_ln_bias,
                                         &tape.final_ln);
  return tape;
}

// Accumulates parameter gradients for one sequence given dL/d(cls).
template <typename Scalar, typename RowExpr>
void BackwardSequence(const BasicEncoderModel<Scalar>& model,
                      const SequenceTape<Scalar>& tape, const RowExpr& d_cls,
                      EncoderWeights<Scalar>& g) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  const Eigen::Index d = cfg.embed_dim;
  const Eigen::Index dh = cfg.head_dim();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Matrix<Scalar> dy = Matrix<Scalar>::Zero(tape.hidden.rows(), d);
  dy.row(0) = d_cls;
  Matrix<Scalar> dx = detail::LayerNormBackward(dy, w.final_ln_gain, tape.final_ln,
                                                g.final_ln_gain, g.final_ln_bias);
  for (int li = static_cast<int>(cfg.n_layers) - 1; li >= 0; --li) {
    const auto& lw = w.layers[li];
    auto& lg = g.layers[li];
    const auto& lt = tape.layers[li];
    const Eigen::Index rows = lt.q.rows();
    const Eigen::Index L = lt.input.rows();

    // Feed-forward block.
    lg.ff_out.noalias() += lt.ff_act.transpose() * dx;
    lg.ff_out_bias.row(0) += dx.colwise().sum();
    Matrix<Scalar> d_pre = dx * lw.ff_out.transpose();
    d_pre.array() *= lt.ff_pre.unaryExpr([](Scalar u) { return detail::GeluGrad(u); }).array();
    lg.ff_in.noalias() += lt.h2.transpose() * d_pre;
    lg.ff_in_bias.row(0) += d_pre.colwise().sum();
    const Matrix<Scalar> d_h2 = d_pre * lw.ff_in.transpose();
    Matrix<Scalar> d_mid = dx + detail::LayerNormBackward(d_h2, lw.ln2_gain, lt.ln2,
                                                          lg.ln2_gain, lg.ln2_bias);

    // Attention block.
    lg.output.noalias() += lt.attn.transpose() * d_mid;
    lg.output_bias.row(0) += d_mid.colwise().sum();
    const Matrix<Scalar> d_attn = d_mid * lw.output.transpose();
    Matrix<Scalar> dq(rows, d), dk(L, d), dv(L, d);
    for (uint32_t h = 0; h < cfg.n_heads; ++h) {
      const Eigen::Index c0 = h * dh;
      const auto& p = lt.probs[h];
      const auto d_o = d_attn.middleCols(c0, dh);
      Matrix<Scalar> dp = d_o * lt.v.middleCols(c0, dh).transpose();
      dv.middleCols(c0, dh) = p.transpose() * d_o;
      const Vector<Scalar> row_dot = (dp.array() * p.array()).rowwise().sum();
      Matrix<Scalar> ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix();
      ds *= scale;
      dq.middleCols(c0, dh) = ds * lt.k.middleCols(c0, dh);
      dk.middleCols(c0, dh) = ds.transpose() * lt.q.middleCols(c0, dh);
    }
    lg.query.noalias() += lt.h1.topRows(rows).transpose() * dq;
    lg.query_bias.row(0) += dq.colwise().sum();
    lg.key.noalias() += lt.h1.transpose() * dk;
    lg.key_bias.row(0) += dk.colwise().sum();
    lg.value.noalias() += lt.h1.transpose() * dv;
    lg.value_bias.row(0) += dv.colwise().sum();
    Matrix<Scalar> d_h1 = dk * lw.key.transpose() + dv * lw.value.transpose();
    d_h1.topRows(rows) += dq * lw.query.transpose();
    Matrix<Scalar> d_in = detail::LayerNormBackward(d_h1, lw.ln1_gain, lt.ln1,
                                                    lg.ln1_gain, lg.ln1_bias);
    d_in.topRows(rows) += d_mid;
    dx = std::move(d_in);
  }
  for (Eigen::Index i = 0; i < dx.rows(); ++i) {
    g.token_embedding.row(tape.ids[i]) += dx.row(i);
    g.position_embedding.row(i) += dx.row(i);
  }
}

// Checks batch preconditions and returns the unpadded views.
template <typename Scalar>
std::vector<std::span<const TokenId>> CheckBatch(
    const BasicEncoderModel<Scalar>& model, std::span<const TokenSequence> batch) {
  std::vector<std::span<const TokenId>> out;
  out.reserve(batch.size());
  const size_t padded = batch.empty() ? 0 : batch[0].ids.size();
  for (const auto& seq : batch) {
    if (seq.ids.size() != padded) {
      Fail(ErrorKind::kModel, "batch sequences differ in padded length");
    }
    if (seq.ids.size() > model.config.max_positions) {
      Fail(ErrorKind::kModel, "sequence length " + std::to_string(seq.ids.size()) +
                                  " exceeds max_positions " +
                                  std::to_string(model.config.max_positions));
    }
    if (seq.length == 0 || seq.length > seq.ids.size()) {
      Fail(ErrorKind::kModel, "sequence has invalid length");
    }
    for (size_t i = 0; i < seq.length; ++i) {
      if (seq.ids[i] < 0 || static_cast<uint32_t>(seq.ids[i]) >= model.config.vocab_size) {
        Fail(ErrorKind::kModel, "token id " + std::to_string(seq.ids[i]) +
                                    " out of range for vocab_size " +
                                    std::to_string(model.config.vocab_size));
      }
    }
    out.emplace_back(seq.ids.data(), seq.length);
  }
  return out;
}

template <typename Scalar>
struct EncoderOutput {
  Matrix<Scalar> cls;                   // batch x d
  std::vector<Matrix<Scalar>> hidden;   // per sequence, padded_length x d
};

// Full forward pass. Hidden rows at padded positions are zero: padding is
// masked out of attention, so it never influences real positions.
template <typename Scalar>
EncoderOutput<Scalar> EncoderForward(const BasicEncoderModel<Scalar>& model,
                                     std::span<const TokenSequence> batch) {
  const auto views = CheckBatch(model, batch);
  EncoderOutput<Scalar> out;
  const Eigen::Index d = model.config.embed_dim;
  out.cls.resize(static_cast<Eigen::Index>(batch.size()), d);
  out.hidden.resize(batch.size());
  ParallelFor(batch.size(), [&](size_t begin, size_t end, int) {
    for (size_t i = begin; i < end; ++i) {
      auto tape = ForwardSequence(model, views[i], /*cls_only=*/false);
      out.cls.row(i) = tape.hidden.row(0);
      out.hidden[i] = Matrix<Scalar>::Zero(batch[i].ids.size(), d);
      out.hidden[i].topRows(tape.hidden.rows()) = tape.hidden;
    }
  });
  return out;
}

// CLS vectors only; the inference path.
template <typename Scalar>
Matrix<Scalar> EncodeCls(const BasicEncoderModel<Scalar>& model,
                         std::span<const TokenSequence> batch) {
  const auto views = CheckBatch(model, batch);
  Matrix<Scalar> cls(static_cast<Eigen::Index>(batch.size()), model.config.embed_dim);
  ParallelFor(batch.size(), [&](size_t begin, size_t end, int) {
    for (size_t i = begin; i < end; ++i) {
      cls.row(i) = ForwardSequence(model, views[i], /*cls_only=*/true).hidden.row(0);
    }
  });
  return cls;
}

// Recorded forward pass of a batch, consumed by EncoderBackward.
template <typename Scalar>
struct BatchTape {
  std::vector<SequenceTape<Scalar>> sequences;
};

template <typename Scalar>
Matrix<Scalar> EncodeClsForTraining(const BasicEncoderModel<Scalar>& model,
                                    std::span<const TokenSequence> batch,
                                    BatchTape<Scalar>& tape) {
  const auto views = CheckBatch(model, batch);
  tape.sequences.resize(batch.size());
  Matrix<Scalar> cls(static_cast<Eigen::Index>(batch.size()), model.config.embed_dim);
  ParallelFor(batch.size(), [&](size_t begin, size_t end, int) {
    for (size_t i = begin; i < end; ++i) {
      tape.sequences[i] = ForwardSequence(model, views[i], /*cls_only=*/true);
      cls.row(i) = tape.sequences[i].hidden.row(0);
    }
  });
  return cls;
}

// Adds dL/dθ to `grads`, given dL/d(cls) for every sequence of the tape
// (one row per sequence).
template <typename Scalar>
void EncoderBackward(const BasicEncoderModel<Scalar>& model,
                     const BatchTape<Scalar>& tape, const Matrix<Scalar>& d_cls,
                     BasicGradientSet<Scalar>& grads) {
  if (static_cast<size_t>(d_cls.rows()) != tape.sequences.size() ||
      d_cls.cols() != static_cast<Eigen::Index>(model.config.embed_dim)) {
    Fail(ErrorKind::kInternal, "d_cls shape does not match the recorded batch");
  }
  if (!d_cls.allFinite()) Fail(ErrorKind::kModel, "non-finite loss gradient");
  const int workers = WorkerCount(tape.sequences.size());
  if (workers <= 1) {
    for (size_t i = 0; i < tape.sequences.size(); ++i) {
      BackwardSequence(model, tape.sequences[i], d_cls.row(i), grads.grads);
    }
    return;
  }
  std::vector<BasicGradientSet<Scalar>> partial(
      workers, BasicGradientSet<Scalar>::Zeros(model.config));
  ParallelFor(tape.sequences.size(), [&](size_t begin, size_t end, int worker) {
    for (size_t i = begin; i < end; ++i) {
      BackwardSequence(model, tape.sequences[i], d_cls.row(i), partial[worker].grads);
    }
  });
  for (const auto& p : partial) grads.Add(p);
}

// ---------------------------------------------------------------------------
// Token-row anonymization

// Redraws the listed token-embedding rows from the initialization
// distribution U(-0.05, 0.05), writing the same values into every model.
template <typename Scalar>
void RedrawTokenRows(const std::vector<BasicEncoderModel<Scalar>*>& models,
                     std::span<const TokenId> rows, Rng& rng) {
  if (models.empty()) return;
  const Eigen::Index d = models[0]->config.embed_dim;
  for (const auto* m : models) {
    if (m->config.embed_dim != models[0]->config.embed_dim ||
        m->config.vocab_size != models[0]->config.vocab_size) {
      Fail(ErrorKind::kInternal, "models disagree on embedding shape");
    }
  }
  for (TokenId row : rows) {
    if (row < 0 || static_cast<uint32_t>(row) >= models[0]->config.vocab_size) {
      Fail(ErrorKind::kInternal, "token row out of range");
    }
    for (Eigen::Index c = 0; c < d; ++c) {
      const Scalar v = static_cast<Scalar>(rng.UniformReal(-0.05, 0.05));
      for (auto* m : models) m->weights.token_embedding(row, c) = v;
    }
  }
}

// Zeroes the gradient of the listed token-embedding rows.
template <typename Scalar>
void ZeroTokenRows(BasicGradientSet<Scalar>& grads, std::span<const TokenId> rows) {
  for (TokenId row : rows) grads.grads.token_embedding.row(row).setZero();
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moments for an ordered list of tensors.
template <typename Scalar>
struct BasicAdamState {
  AdamOptions options;
  std::vector<Matrix<Scalar>> first_moment;
  std::vector<Matrix<Scalar>> second_moment;
  uint64_t step = 0;

  static BasicAdamState For(const std::vector<Matrix<Scalar>*>& params,
                            const AdamOptions& options) {
    BasicAdamState s;
    s.options = options;
    for (const auto* p : params) {
      s.first_moment.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
      s.second_moment.push_back(Matrix<Scalar>::Zero(p->rows(), p->cols()));
    }
    return s;
  }
};

using AdamState = BasicAdamState<float>;

// One bias-corrected Adam update over aligned parameter/gradient lists.
template <typename Scalar>
void AdamStep(const std::vector<Matrix<Scalar>*>& params,
              const std::vector<const Matrix<Scalar>*>& grads,
              BasicAdamState<Scalar>& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    Fail(ErrorKind::kInternal, "Adam parameter/gradient/state lists are misaligned");
  }
  for (size_t i = 0; i < grads.size(); ++i) {
    if (grads[i]->rows() != params[i]->rows() || grads[i]->cols() != params[i]->cols() ||
        state.first_moment[i].rows() != params[i]->rows() ||
        state.first_moment[i].cols() != params[i]->cols()) {
      Fail(ErrorKind::kInternal, "Adam tensor shapes are not congruent");
    }
    if (!grads[i]->allFinite()) Fail(ErrorKind::kModel, "non-finite gradient in Adam step");
  }
  ++state.step;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(o.beta1);
  const Scalar b2 = static_cast<Scalar>(o.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(o.beta1, t));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(o.beta2, t));
  const Scalar lr = static_cast<Scalar>(o.learning_rate);
  const Scalar eps = static_cast<Scalar>(o.epsilon);
  for (size_t i = 0; i < params.size(); ++i) {
    auto m = state.first_moment[i].array();
    auto v = state.second_moment[i].array();
    const auto g = grads[i]->array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    params[i]->array() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

template <typename Scalar>
std::vector<Matrix<Scalar>*> ParameterList(EncoderWeights<Scalar>& w) {
  std::vector<Matrix<Scalar>*> out;
  w.Visit([&](const std::string&, Matrix<Scalar>& m) { out.push_back(&m); });
  return out;
}

template <typename Scalar>
std::vector<const Matrix<Scalar>*> ParameterList(const EncoderWeights<Scalar>& w) {
  std::vector<const Matrix<Scalar>*> out;
  w.Visit([&](const std::string&, const Matrix<Scalar>& m) { out.push_back(&m); });
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckOptions {
  double epsilon = 1e-4;
  size_t samples_per_tensor = 8;
  uint64_t seed = 1;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  size_t checked = 0;
  std::string worst;  // location of the worst entry
};

inline double RelativeError(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Central differences over every coordinate of a flat parameter vector.
// `loss` maps a parameter vector to a scalar.
template <typename LossFn>
GradCheckResult FiniteDifferenceCheck(std::vector<double> params,
                                      std::span<const double> analytic,
                                      LossFn&& loss,
                                      const GradCheckOptions& options) {
  if (!(options.epsilon > 0)) Fail(ErrorKind::kConfig, "finite-difference epsilon must be > 0");
  if (analytic.size() != params.size()) {
    Fail(ErrorKind::kInternal, "analytic gradient size mismatch");
  }
  GradCheckResult result;
  for (size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + options.epsilon;
    const double up = loss(std::span<const double>(params));
    params[i] = saved - options.epsilon;
    const double down = loss(std::span<const double>(params));
    params[i] = saved;
    const double numeric = (up - down) / (2 * options.epsilon);
    const double err = RelativeError(analytic[i], numeric, options.floor);
    ++result.checked;
    if (err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst = "coordinate " + std::to_string(i);
    }
  }
  return result;
}

// Samples entries of every encoder tensor (token-embedding rows are drawn
// from `active_tokens` when given, since other rows have zero gradient) and
// compares `analytic` against central differences of `loss`, evaluated on a
// double-precision copy of the model.
template <typename GradScalar, typename LossFn>
GradCheckResult FiniteDifferenceCheck(const BasicEncoderModel<double>& model,
                                      const BasicGradientSet<GradScalar>& analytic,
                                      LossFn&& loss,
                                      const GradCheckOptions& options,
                                      std::span<const TokenId> active_tokens = {}) {
  if (!(options.epsilon > 0)) Fail(ErrorKind::kConfig, "finite-difference epsilon must be > 0");
  BasicEncoderModel<double> probe = model;
  std::vector<std::pair<std::string, Matrix<double>*>> tensors;
  probe.weights.Visit([&](const std::string& name, Matrix<double>& m) {
    tensors.emplace_back(name, &m);
  });
  std::vector<const Matrix<GradScalar>*> grads;
  analytic.grads.Visit([&](const std::string&, const Matrix<GradScalar>& m) {
    grads.push_back(&m);
  });
  Rng rng(options.seed);
  GradCheckResult result;
  for (size_t t = 0; t < tensors.size(); ++t) {
    auto& [name, m] = tensors[t];
    for (size_t s = 0; s < options.samples_per_tensor; ++s) {
      Eigen::Index r = static_cast<Eigen::Index>(rng.Uniform(m->rows()));
      const Eigen::Index c = static_cast<Eigen::Index>(rng.Uniform(m->cols()));
      if (name == "token_embedding" && !active_tokens.empty()) {
        r = active_tokens[rng.Uniform(active_tokens.size())];
      }
      double& p = (*m)(r, c);
      const double saved = p;
      p = saved + options.epsilon;
      const double up = loss(static_cast<const BasicEncoderModel<double>&>(probe));
      p = saved - options.epsilon;
      const double down = loss(static_cast<const BasicEncoderModel<double>&>(probe));
      p = saved;
      const double numeric = (up - down) / (2 * options.epsilon);
      const double a = static_cast<double>((*grads[t])(r, c));
      const double err = RelativeError(a, numeric, options.floor);
      ++result.checked;
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst = name + "[" + std::to_string(r) + "," + std::to_string(c) +
                       "] analytic=" + std::to_string(a) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: "BLNK", u32 version, config, then named little-endian float32
// tensors (name, rank, dims, row-major data).

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  EncoderModel model;
  std::map<std::string, Matrix<float>> extras;  // e.g. "cross.w"
};

void SaveCheckpoint(const std::filesystem::path& path, const EncoderModel& model,
                    const std::map<std::string, Matrix<float>>& extras = {});
Checkpoint LoadCheckpoint(const std::filesystem::path& path);

// FNV-1a over config and parameter bytes.
uint64_t ModelFingerprint(const EncoderModel& model);

}  // namespace linkstage::nn
