#include "taxapln/random.hpp"

#include <algorithm>

#include "taxapln/error.hpp"

namespace taxapln {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view name,
                          std::initializer_list<std::uint64_t> indices) {
    std::uint64_t s = splitmix64(master ^ fnv1a(name));
    for (std::uint64_t i : indices) s = splitmix64(s ^ splitmix64(i + 0x632be59bd9b4e019ULL));
    return s;
}

Rng make_rng(std::uint64_t master, std::string_view name, std::initializer_list<std::uint64_t> indices) {
    return Rng(derive_seed(master, name, indices));
}

Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd out(rows, cols);
    // Row-major fill so that a draw for row i does not depend on the column count of later rows.
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = normal(rng);
    return out;
}

double beta_draw(double a, double b, Rng& rng) {
    std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
    const double x = ga(rng);
    const double y = gb(rng);
    if (x + y <= 0.0) return 0.5;
    return x / (x + y);
}

Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> multinomial(std::int64_t total,
                                                           const Eigen::Ref<const Eigen::VectorXd>& probs,
                                                           Rng& rng) {
    const Eigen::Index k = probs.size();
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1> out = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>::Zero(k);
    if (k == 0 || total <= 0) return out;
    double remaining_mass = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
        if (!(probs[j] >= 0.0)) throw NumericError("InvalidProbability", "multinomial probabilities must be >= 0");
        remaining_mass += probs[j];
    }
    if (remaining_mass <= 0.0) throw NumericError("InvalidProbability", "multinomial probabilities sum to zero");

    std::int64_t remaining = total;
    for (Eigen::Index j = 0; j + 1 < k && remaining > 0; ++j) {
        const double p = std::clamp(probs[j] / remaining_mass, 0.0, 1.0);
        std::int64_t draw = 0;
        if (p >= 1.0) {
            draw = remaining;
        } else if (p > 0.0) {
            std::binomial_distribution<std::int64_t> binom(remaining, p);
            draw = binom(rng);
        }
        out[j] = draw;
        remaining -= draw;
        remaining_mass -= probs[j];
        if (remaining_mass <= 0.0) break;
    }
    // Whatever is left goes to the last category with positive mass.
    if (remaining > 0) {
        Eigen::Index last = k - 1;
        while (last > 0 && probs[last] <= 0.0) --last;
        out[last] += remaining;
    }
    return out;
}

}  // namespace taxapln
