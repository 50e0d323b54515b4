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

// Teacher-to-student distillation over a shared candidate set:
//
//   sigma(z, T)_i = exp(z_i / T) / sum_j exp(z_j / T)
//   L_dist = H(sigma(z_t, T), sigma(z_s, T))
//   L_st   = H(onehot(gold), sigma(z_s, 1))
//   L      = alpha * L_st + (1 - alpha) * L_dist

#pragma once

#include <cmath>
#include <filesystem>
#include <span>
#include <vector>

#include "linkstage/biencoder.hpp"
#include "linkstage/crossencoder.hpp"
#include "linkstage/losses.hpp"

namespace linkstage {

struct KdConfig {
  double temperature = 2.0;
  double alpha = 0.5;
  size_t k = 10;                  // candidates from the student's retriever
  bool scale_by_t_squared = false;
  size_t epochs = 2;
  size_t batch_size = 8;          // mentions per update
  double learning_rate = 1e-3;
  uint64_t seed = 1;
  size_t refresh_interval = 1;    // epochs between candidate refreshes
  double validation_fraction = 0.1;
  bool anonymize_domain_tokens = true;  // as in bi-encoder training

  void Validate() const;
};

// Max-subtracted softmax of z / T. Throws a config error unless T > 0.
template <typename Derived>
nn::Matrix<typename Derived::Scalar> TemperedSoftmax(const Eigen::MatrixBase<Derived>& z,
                                                     double temperature) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > 0.0)) Fail(ErrorKind::kConfig, "temperature must be > 0");
  const nn::Matrix<Scalar> row = z.derived().reshaped(1, z.size());
  return Softmax((row.array() / static_cast<Scalar>(temperature)).matrix());
}

template <typename Scalar>
struct KdLossResult {
  Scalar l_st = 0;
  Scalar l_dist = 0;
  Scalar total = 0;
  nn::Matrix<Scalar> grad;  // dL/dz_s, 1 x k
};

// Teacher logits are constants. Gradients:
//   dL_st/dz_s   = sigma(z_s, 1) - onehot(gold)
//   dL_dist/dz_s = (sigma(z_s, T) - sigma(z_t, T)) / T   (times T^2 if scaled)
template <typename Scalar>
KdLossResult<Scalar> KdLoss(const nn::Matrix<Scalar>& teacher, const nn::Matrix<Scalar>& student,
                            Eigen::Index gold, const KdConfig& config) {
  if (teacher.size() != student.size() || student.size() == 0) {
    Fail(ErrorKind::kInternal, "teacher and student logits differ in length");
  }
  if (!(config.alpha >= 0.0 && config.alpha <= 1.0)) {
    Fail(ErrorKind::kConfig, "alpha must be in [0, 1]");
  }
  if (!teacher.allFinite()) Fail(ErrorKind::kModel, "non-finite teacher logits");
  const Scalar t = static_cast<Scalar>(config.temperature);
  const nn::Matrix<Scalar> zs = student.reshaped(1, student.size());
  const auto st = SoftmaxCrossEntropy(zs, gold);
  const nn::Matrix<Scalar> p = TemperedSoftmax(teacher, config.temperature);
  const nn::Matrix<Scalar> zs_t = (zs.array() / t).matrix();
  // log sigma(z_s, T)_i = z_i / T - logsumexp(z / T)
  const Scalar lse = LogSumExp(zs_t);
  Scalar l_dist = 0;
  for (Eigen::Index i = 0; i < zs_t.size(); ++i) {
    l_dist -= p(0, i) * (zs_t(0, i) - lse);
  }
  nn::Matrix<Scalar> g_dist = (Softmax(zs_t) - p) / t;
  if (config.scale_by_t_squared) {
    l_dist *= t * t;
    g_dist *= t * t;
  }
  const Scalar a = static_cast<Scalar>(config.alpha);
  KdLossResult<Scalar> out;
  out.l_st = st.loss;
  out.l_dist = l_dist;
  out.total = a * st.loss + (Scalar(1) - a) * l_dist;
  out.grad = a * st.grad + (Scalar(1) - a) * g_dist;
  return out;
}

struct KdEpochLog {
  size_t epoch = 0;
  double l_st = 0.0;
  double l_dist = 0.0;
  double l_total = 0.0;
  double val_acc = 0.0;  // student top-1 on held-out training mentions
};

struct KdTrainResult {
  BiEncoder student;
  std::vector<KdEpochLog> log;
};

// Fine-tunes `student` on split.train_examples. Each epoch (per refresh
// interval) re-retrieves top-k candidates with the current student; a gold
// missing from the list replaces the last candidate. `teacher` may be null
// only when alpha == 1, in which case l_dist is reported as 0.
KdTrainResult TrainDistilled(const CrossEncoder* teacher, BiEncoder student,
                             const ZeroShotSplit& split, const KdConfig& config);

// One JSON object per line with keys epoch, l_st, l_dist, l_total, val_acc.
void WriteKdLog(const std::vector<KdEpochLog>& log, const std::filesystem::path& path);

}  // namespace linkstage
