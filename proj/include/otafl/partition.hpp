#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "otafl/common.hpp"
#include "otafl/dataset.hpp"
#include "otafl/objectives.hpp"
#include "otafl/rng.hpp"

namespace otafl {

enum class Balance { equal, dirichlet };

struct PartitionSpec {
  std::size_t clients = 10;
  int labels_per_client = 10;  // p; p == class count is the IID split
  Balance balance = Balance::equal;
  double dirichlet_gamma = 1.0;
  std::uint64_t seed = 0;
};

namespace detail {

/// Splits n items into parts proportional to `weights` (largest remainder).
inline std::vector<std::size_t> proportional_sizes(std::size_t n, const std::vector<double>& weights) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> sizes(weights.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const double exact = static_cast<double>(n) * weights[k] / total;
    sizes[k] = static_cast<std::size_t>(std::floor(exact));
    assigned += sizes[k];
    remainders.emplace_back(exact - std::floor(exact), k);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++sizes[remainders[r % remainders.size()].second];
  return sizes;
}

inline std::vector<double> client_shares(const PartitionSpec& spec) {
  std::vector<double> q(spec.clients, 1.0);
  if (spec.balance == Balance::dirichlet) {
    Rng rng = make_stream(spec.seed, StreamTag::dirichlet);
    std::gamma_distribution<double> gamma(spec.dirichlet_gamma, 1.0);
    for (auto& v : q) v = std::max(gamma(rng), 1e-300);
  }
  return q;
}

}  // namespace detail

/// Label-skewed split. Samples are grouped by label, each group is cut into
/// shards, and client i receives the shards at positions i, i+m, ..., i+(p-1)m
/// of the label-major shard list, which always spans p distinct labels.
/// p == C falls back to a uniform random split. Shard (or part) sizes follow
/// the client shares: equal, or Dirichlet(gamma) for the unbalanced setting.
inline ClientPartition partition_label_based(const Dataset& ds, const PartitionSpec& spec) {
  ds.validate();
  const std::size_t m = spec.clients;
  const auto C = static_cast<std::size_t>(ds.classes);
  require(m >= 1, "clients must be >= 1");
  require(spec.labels_per_client >= 1 && static_cast<std::size_t>(spec.labels_per_client) <= C,
          "p (labels per client) must be in [1, " + std::to_string(C) + "]");
  require(spec.balance == Balance::equal || spec.dirichlet_gamma > 0.0, "dirichlet gamma must be > 0");
  const auto p = static_cast<std::size_t>(spec.labels_per_client);

  Rng rng = make_stream(spec.seed, StreamTag::partition);
  const std::vector<double> shares = detail::client_shares(spec);

  ClientPartition out;
  out.indices.assign(m, {});

  if (p == C) {
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::shuffle(all.begin(), all.end(), rng);
    const auto sizes = detail::proportional_sizes(all.size(), shares);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < m; ++i) {
      require(sizes[i] >= 1, "m exceeds the sample supply: client " + std::to_string(i) + " would be empty");
      out.indices[i].assign(all.begin() + static_cast<std::ptrdiff_t>(pos),
                            all.begin() + static_cast<std::ptrdiff_t>(pos + sizes[i]));
      pos += sizes[i];
    }
  } else {
    std::vector<std::vector<std::size_t>> groups(C);
    for (std::size_t n = 0; n < ds.size(); ++n) groups[static_cast<std::size_t>(ds.labels[n])].push_back(n);
    for (auto& g : groups) std::shuffle(g.begin(), g.end(), rng);
    std::vector<std::size_t> label_order(C);
    std::iota(label_order.begin(), label_order.end(), std::size_t{0});
    std::shuffle(label_order.begin(), label_order.end(), rng);

    const std::size_t shards = m * p;
    // Fewer shards than labels would leave whole label groups unassigned.
    require(shards >= C, "m * p must be >= the class count so every sample is assigned");
    std::size_t position = 0;
    for (std::size_t rank = 0; rank < C; ++rank) {
      const std::size_t label = label_order[rank];
      const std::size_t count = shards / C + (rank < shards % C ? 1 : 0);
      if (count == 0) continue;
      std::vector<std::size_t> owners(count);
      std::vector<double> weights(count);
      for (std::size_t k = 0; k < count; ++k) {
        owners[k] = (position + k) % m;
        weights[k] = shares[owners[k]];
      }
      const auto& group = groups[label];
      const auto sizes = detail::proportional_sizes(group.size(), weights);
      std::size_t pos = 0;
      for (std::size_t k = 0; k < count; ++k) {
        require(sizes[k] >= 1, "m * p exceeds the shard supply of label " + std::to_string(label));
        auto& dst = out.indices[owners[k]];
        dst.insert(dst.end(), group.begin() + static_cast<std::ptrdiff_t>(pos),
                   group.begin() + static_cast<std::ptrdiff_t>(pos + sizes[k]));
        pos += sizes[k];
      }
      position += count;
    }
  }

  for (auto& idx : out.indices) std::sort(idx.begin(), idx.end());
  out.alpha = ClientPartition::weights_from_sizes(out.indices);
  return out;
}

/// Random SPD curvature H_i = Q_i diag(lambda) Q_i' with lambda uniform in
/// [1, 1 + heterogeneity * spread] and e_i = e_0 + heterogeneity * u_i. With
/// heterogeneity 0 every client is identical (H_i = I, e_i = e_0).
inline QuadraticProblem synth_quadratic(std::size_t m, std::size_t d, double heterogeneity, std::uint64_t seed,
                                        double gradient_noise_std = 0.0, double spread = 1.0) {
  require(m >= 1, "clients must be >= 1");
  require(d >= 1, "dimension must be >= 1");
  require(heterogeneity >= 0.0 && spread >= 0.0, "heterogeneity must be >= 0");
  Rng rng = make_stream(seed, StreamTag::synth_problem);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const auto D = static_cast<Eigen::Index>(d);

  Vector e0(D);
  for (Eigen::Index j = 0; j < D; ++j) e0(j) = n01(rng);

  std::vector<Matrix> H;
  std::vector<Vector> e;
  for (std::size_t i = 0; i < m; ++i) {
    Matrix G(D, D);
    for (Eigen::Index r = 0; r < D; ++r)
      for (Eigen::Index c = 0; c < D; ++c) G(r, c) = n01(rng);
    const Matrix Q = Eigen::HouseholderQR<Matrix>(G).householderQ();
    Vector lambda(D);
    for (Eigen::Index j = 0; j < D; ++j) lambda(j) = 1.0 + heterogeneity * spread * u01(rng);
    Matrix Hi = Q * lambda.asDiagonal() * Q.transpose();
    Hi = 0.5 * (Hi + Hi.transpose());
    H.push_back(std::move(Hi));
    Vector ei = e0;
    for (Eigen::Index j = 0; j < D; ++j) ei(j) += heterogeneity * n01(rng);
    e.push_back(std::move(ei));
  }
  return QuadraticProblem(std::move(H), std::move(e), std::vector<double>(m, 1.0 / static_cast<double>(m)),
                          gradient_noise_std);
}

/// Largest condition number over the local curvature matrices.
inline double max_condition_number(const QuadraticProblem& q) {
  double worst = 1.0;
  for (std::size_t i = 0; i < q.clients(); ++i) {
    Eigen::JacobiSVD<Matrix> svd(q.H(i));
    const auto& s = svd.singularValues();
    worst = std::max(worst, s(0) / s(s.size() - 1));
  }
  return worst;
}

}  // namespace otafl
