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

// Softmax cross-entropy pieces shared by the bi-encoder, cross-encoder and
// distillation losses.

#pragma once

#include <cmath>

#include <Eigen/Core>

#include "linkstage/error.hpp"
#include "linkstage/nn.hpp"

namespace linkstage {

template <typename Scalar>
struct LossAndGrad {
  Scalar loss = 0;
  nn::Matrix<Scalar> grad;  // same shape as the input scores
};

template <typename Derived>
typename Derived::Scalar LogSumExp(const Eigen::MatrixBase<Derived>& row) {
  using Scalar = typename Derived::Scalar;
  const Scalar mx = row.maxCoeff();
  return mx + std::log((row.array() - mx).exp().sum());
}

// Row softmax with max subtraction.
template <typename Derived>
nn::Matrix<typename Derived::Scalar> Softmax(const Eigen::MatrixBase<Derived>& row) {
  using Scalar = typename Derived::Scalar;
  const Scalar mx = row.maxCoeff();
  nn::Matrix<Scalar> p = (row.array() - mx).exp().matrix();
  p /= p.sum();
  return p;
}

// -logit[gold] + logsumexp(logits) for a single row, with gradient
// softmax(logits) - onehot(gold).
template <typename Derived>
LossAndGrad<typename Derived::Scalar> SoftmaxCrossEntropy(
    const Eigen::MatrixBase<Derived>& logits, Eigen::Index gold) {
  using Scalar = typename Derived::Scalar;
  if (gold < 0 || gold >= logits.size()) {
    Fail(ErrorKind::kInternal, "gold index outside the logits");
  }
  if (!logits.allFinite()) Fail(ErrorKind::kModel, "non-finite logits");
  const nn::Matrix<Scalar> row = logits.derived().reshaped(1, logits.size());
  LossAndGrad<Scalar> out;
  out.loss = -row(0, gold) + LogSumExp(row);
  out.grad = Softmax(row);
  out.grad(0, gold) -= Scalar(1);
  return out;
}

}  // namespace linkstage
