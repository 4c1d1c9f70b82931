#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace taxapln {

using Rng = std::mt19937_64;

/// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// Sub-seed derivation: the master seed is mixed with the FNV-1a hash of a
/// stage name and any number of integer indices through splitmix64 rounds.
/// derive_seed(s, "fit", {label}) is stable across runs and platforms.
std::uint64_t derive_seed(std::uint64_t master, std::string_view name,
                          std::initializer_list<std::uint64_t> indices = {});

Rng make_rng(std::uint64_t master, std::string_view name,
             std::initializer_list<std::uint64_t> indices = {});

/// Matrix of independent standard normal draws.
Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

/// Beta(a, b) draw via two gamma variates.
double beta_draw(double a, double b, Rng& rng);

/// Multinomial draw by sequential conditional binomials. Probabilities need
/// not be normalised; zero-mass input with total > 0 is rejected.
Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> multinomial(std::int64_t total,
                                                           const Eigen::Ref<const Eigen::VectorXd>& probs,
                                                           Rng& rng);

}  // namespace taxapln
