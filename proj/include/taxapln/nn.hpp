#pragma once

#include <string>
#include <vector>

#include "taxapln/autodiff.hpp"

namespace taxapln::nn {

using ad::Matrix;
using ad::Parameter;
using ad::ParameterRefs;
using ad::Tape;
using ad::Var;

/// Affine map y = x W + b. W is in x out, initialised U(+-sqrt(6/(in+out))),
/// b starts at zero.
struct Dense {
    Parameter weight;
    Parameter bias;

    Dense() = default;
    Dense(const std::string& name, int in, int out, Rng& rng);

    int in() const { return static_cast<int>(weight.value.rows()); }
    int out() const { return static_cast<int>(weight.value.cols()); }
    Var operator()(Tape& tape, const Var& x) const;
    void collect(ParameterRefs& out);
};

enum class Activation { tanh, relu };

Var activate(const Var& x, Activation a);

/// in -> hidden -> out with one hidden nonlinearity.
struct TwoLayerNet {
    Dense hidden;
    Dense output;
    Activation activation = Activation::tanh;

    TwoLayerNet() = default;
    TwoLayerNet(const std::string& name, int in, int width, int out, Rng& rng, Activation a = Activation::tanh);

    Var operator()(Tape& tape, const Var& x) const;
    void collect(ParameterRefs& out);
};

/// Gated recurrent unit with the gate layout [reset | update | candidate]:
///   r = s(x Wr + h Ur + b), z = s(x Wz + h Uz + b)
///   n = tanh(x Wn + bn + r * (h Un + cn)),  h' = (1 - z) * n + z * h
struct GruCell {
    Parameter w_input;   ///< in x 3H
    Parameter w_hidden;  ///< H x 3H
    Parameter b_input;   ///< 1 x 3H
    Parameter b_hidden;  ///< 1 x 3H

    GruCell() = default;
    GruCell(const std::string& name, int in, int hidden, Rng& rng);

    int in() const { return static_cast<int>(w_input.value.rows()); }
    int hidden() const { return static_cast<int>(w_hidden.value.rows()); }
    Var operator()(Tape& tape, const Var& x, const Var& h) const;
    void collect(ParameterRefs& out);
};

/// Feature-wise affine modulation a' = alpha(C) * a + gamma(C). The head is a
/// two-layer network C -> width -> 2|a| whose first half is offset by one,
/// so a zero output layer is the identity modulation.
struct FilmHead {
    TwoLayerNet net;
    int features = 0;

    FilmHead() = default;
    FilmHead(const std::string& name, int covariates, int width, int features, Rng& rng);

    /// (alpha, gamma), each batch x features.
    std::pair<Var, Var> modulators(Tape& tape, const Var& covariates) const;
    Var operator()(Tape& tape, const Var& a, const Var& covariates) const;
    void collect(ParameterRefs& out);
    /// Sets the output layer to zero so the head becomes the identity.
    void make_identity();
};

/// alpha * a + gamma with shape checks.
Var film_modulate(const Var& a, const Var& alpha, const Var& gamma);

}  // namespace taxapln::nn
