#include "taxapln/nn.hpp"

#include <cmath>

#include "taxapln/error.hpp"

namespace taxapln::nn {

namespace {

Matrix glorot_uniform(int in, int out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-bound, bound);
    Matrix w(in, out);
    for (int i = 0; i < in; ++i)
        for (int j = 0; j < out; ++j) w(i, j) = u(rng);
    return w;
}

}  // namespace

Dense::Dense(const std::string& name, int in, int out, Rng& rng)
    : weight(name + ".weight", glorot_uniform(in, out, rng)), bias(name + ".bias", Matrix::Zero(1, out)) {}

Var Dense::operator()(Tape& tape, const Var& x) const {
    if (x.cols() != in())
        throw NumericError("ShapeMismatch", weight.name + ": input has " + std::to_string(x.cols()) +
                                                " columns, expected " + std::to_string(in()));
    // Bound through const_cast: layers are read-only during the forward pass,
    // only backward() writes into Parameter::grad.
    auto& w = const_cast<Parameter&>(weight);
    auto& b = const_cast<Parameter&>(bias);
    return ad::matmul(x, tape.parameter(w)) + tape.parameter(b);
}

void Dense::collect(ParameterRefs& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

Var activate(const Var& x, Activation a) {
    switch (a) {
        case Activation::tanh: return ad::tanh(x);
        case Activation::relu: return ad::relu(x);
    }
    return x;
}

TwoLayerNet::TwoLayerNet(const std::string& name, int in, int width, int out, Rng& rng, Activation a)
    : hidden(name + ".hidden", in, width, rng), output(name + ".output", width, out, rng), activation(a) {}

Var TwoLayerNet::operator()(Tape& tape, const Var& x) const {
    return output(tape, activate(hidden(tape, x), activation));
}

void TwoLayerNet::collect(ParameterRefs& out) {
    hidden.collect(out);
    output.collect(out);
}

GruCell::GruCell(const std::string& name, int in, int hidden_size, Rng& rng)
    : w_input(name + ".w_input", glorot_uniform(in, 3 * hidden_size, rng)),
      w_hidden(name + ".w_hidden", glorot_uniform(hidden_size, 3 * hidden_size, rng)),
      b_input(name + ".b_input", Matrix::Zero(1, 3 * hidden_size)),
      b_hidden(name + ".b_hidden", Matrix::Zero(1, 3 * hidden_size)) {}

Var GruCell::operator()(Tape& tape, const Var& x, const Var& h) const {
    const int H = hidden();
    if (x.cols() != in() || h.cols() != H || x.rows() != h.rows())
        throw NumericError("ShapeMismatch", w_input.name + ": GRU input or hidden state has the wrong shape");
    auto& wi = const_cast<Parameter&>(w_input);
    auto& wh = const_cast<Parameter&>(w_hidden);
    auto& bi = const_cast<Parameter&>(b_input);
    auto& bh = const_cast<Parameter&>(b_hidden);
    const Var gi = ad::matmul(x, tape.parameter(wi)) + tape.parameter(bi);
    const Var gh = ad::matmul(h, tape.parameter(wh)) + tape.parameter(bh);
    const Var r = ad::sigmoid(ad::slice_cols(gi, 0, H) + ad::slice_cols(gh, 0, H));
    const Var z = ad::sigmoid(ad::slice_cols(gi, H, H) + ad::slice_cols(gh, H, H));
    const Var n = ad::tanh(ad::slice_cols(gi, 2 * H, H) + r * ad::slice_cols(gh, 2 * H, H));
    // (1 - z) * n + z * h  ==  n + z * (h - n)
    return n + z * (h - n);
}

void GruCell::collect(ParameterRefs& out) {
    out.push_back(&w_input);
    out.push_back(&w_hidden);
    out.push_back(&b_input);
    out.push_back(&b_hidden);
}

FilmHead::FilmHead(const std::string& name, int covariates, int width, int features_, Rng& rng)
    : net(name, covariates, width, 2 * features_, rng), features(features_) {}

std::pair<Var, Var> FilmHead::modulators(Tape& tape, const Var& covariates) const {
    const Var out = net(tape, covariates);
    return {ad::slice_cols(out, 0, features) + 1.0, ad::slice_cols(out, features, features)};
}

Var FilmHead::operator()(Tape& tape, const Var& a, const Var& covariates) const {
    auto [alpha, gamma] = modulators(tape, covariates);
    return film_modulate(a, alpha, gamma);
}

void FilmHead::collect(ParameterRefs& out) { net.collect(out); }

void FilmHead::make_identity() {
    net.output.weight.value.setZero();
    net.output.bias.value.setZero();
}

Var film_modulate(const Var& a, const Var& alpha, const Var& gamma) {
    if (alpha.cols() != a.cols() || gamma.cols() != a.cols())
        throw NumericError("ShapeMismatch", "FiLM modulators must match the modulated width");
    return a * alpha + gamma;
}

}  // namespace taxapln::nn
