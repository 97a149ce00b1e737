#include "fedimit/nn.hpp"

#include "fedimit/codec.hpp"
#include "fedimit/error.hpp"
#include "fedimit/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

namespace fedimit::nn {

using json = nlohmann::json;

std::string_view to_string(Activation a) {
    return a == Activation::tanh ? "tanh" : "identity";
}

Activation activation_from_string(std::string_view s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw SpecError("unknown activation '" + std::string(s) + "'");
}

void NetworkSpec::validate() const {
    if (layers.empty()) throw SpecError("network has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
        if (layers[k].in_dim == 0 || layers[k].out_dim == 0)
            throw SpecError("layer " + std::to_string(k) + " has a zero dimension");
        if (k + 1 < layers.size() && layers[k].out_dim != layers[k + 1].in_dim)
            throw SpecError("layer " + std::to_string(k) + " output does not chain into layer " +
                            std::to_string(k + 1));
    }
    if (layers.back().activation != Activation::identity)
        throw SpecError("last layer must be identity");
    if (layers.back().out_dim != 1) throw SpecError("output dimension must be 1");
    if (feature_prefix_len >= layers.size())
        throw SpecError("feature prefix must leave at least one trainable layer");
}

std::size_t NetworkSpec::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.out_dim * l.in_dim + l.out_dim;
    return n;
}

std::string NetworkSpec::canonical() const {
    std::ostringstream os;
    os << "netspec/v1|prefix=" << feature_prefix_len;
    for (const auto& l : layers) os << '|' << l.in_dim << 'x' << l.out_dim << ':' << to_string(l.activation);
    return os.str();
}

std::string NetworkSpec::hash() const { return codec::sha256_hex(canonical()); }

NetworkSpec NetworkSpec::dense(std::size_t input_dim, std::span<const std::size_t> hidden,
                               std::size_t feature_prefix_len) {
    NetworkSpec spec;
    std::size_t prev = input_dim;
    for (auto h : hidden) {
        spec.layers.push_back({prev, h, Activation::tanh});
        prev = h;
    }
    spec.layers.push_back({prev, 1, Activation::identity});
    spec.feature_prefix_len = feature_prefix_len;
    spec.validate();
    return spec;
}

NetworkSpec default_spec(std::size_t input_dim) {
    static constexpr std::size_t hidden[] = {32, 32, 16};
    return NetworkSpec::dense(input_dim, hidden, 2);
}

std::size_t ParameterSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
}

double ParameterSet::squared_norm() const {
    double s = 0.0;
    for (const auto& l : layers) s += l.weight.squaredNorm() + l.bias.squaredNorm();
    return s;
}

bool ParameterSet::all_finite() const {
    return std::all_of(layers.begin(), layers.end(), [](const Layer& l) {
        return l.weight.allFinite() && l.bias.allFinite();
    });
}

void ParameterSet::check_shapes(const NetworkSpec& spec) const {
    if (layers.size() != spec.layers.size())
        throw DimensionError("parameter set has " + std::to_string(layers.size()) +
                             " layers, spec has " + std::to_string(spec.layers.size()));
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const auto& l = layers[k];
        const auto& s = spec.layers[k];
        if (static_cast<std::size_t>(l.weight.rows()) != s.out_dim ||
            static_cast<std::size_t>(l.weight.cols()) != s.in_dim ||
            static_cast<std::size_t>(l.bias.size()) != s.out_dim)
            throw DimensionError("layer " + std::to_string(k) + " shape does not match spec");
    }
}

namespace {

bool same_bits(const double* a, const double* b, Eigen::Index n) {
    return std::memcmp(a, b, static_cast<std::size_t>(n) * sizeof(double)) == 0;
}

void check_same_shape(const ParameterSet& a, const ParameterSet& b) {
    if (a.layers.size() != b.layers.size()) throw DimensionError("layer count mismatch");
    for (std::size_t k = 0; k < a.layers.size(); ++k) {
        if (a.layers[k].weight.rows() != b.layers[k].weight.rows() ||
            a.layers[k].weight.cols() != b.layers[k].weight.cols() ||
            a.layers[k].bias.size() != b.layers[k].bias.size())
            throw DimensionError("shape mismatch in layer " + std::to_string(k));
    }
}

}  // namespace

bool bit_identical(const Layer& a, const Layer& b) {
    return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
           a.bias.size() == b.bias.size() &&
           same_bits(a.weight.data(), b.weight.data(), a.weight.size()) &&
           same_bits(a.bias.data(), b.bias.data(), a.bias.size());
}

bool bit_identical(const ParameterSet& a, const ParameterSet& b) {
    if (a.spec_hash != b.spec_hash || a.layers.size() != b.layers.size()) return false;
    for (std::size_t k = 0; k < a.layers.size(); ++k)
        if (!bit_identical(a.layers[k], b.layers[k])) return false;
    return true;
}

Batch::Batch(Matrix x, Vector y) : inputs(std::move(x)), targets(std::move(y)) {
    if (inputs.rows() != targets.size()) throw DimensionError("batch input/target count mismatch");
}

Batch::Batch(const std::vector<std::vector<double>>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw DimensionError("batch input/target count mismatch");
    const std::size_t dim = x.empty() ? 0 : x.front().size();
    inputs.resize(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(dim));
    targets.resize(static_cast<Eigen::Index>(y.size()));
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i].size() != dim) throw DimensionError("ragged batch inputs");
        for (std::size_t j = 0; j < dim; ++j) inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x[i][j];
        targets(static_cast<Eigen::Index>(i)) = y[i];
    }
}

ParameterSet init_params(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    ParameterSet p;
    p.spec_hash = spec.hash();
    for (const auto& s : spec.layers) {
        const double bound = std::sqrt(6.0 / static_cast<double>(s.in_dim + s.out_dim));
        Layer l;
        l.weight.resize(static_cast<Eigen::Index>(s.out_dim), static_cast<Eigen::Index>(s.in_dim));
        for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-bound, bound);
        l.bias = Vector::Zero(static_cast<Eigen::Index>(s.out_dim));
        p.layers.push_back(std::move(l));
    }
    return p;
}

ParameterSet zero_params(const NetworkSpec& spec) {
    spec.validate();
    ParameterSet p;
    p.spec_hash = spec.hash();
    for (const auto& s : spec.layers)
        p.layers.push_back({Matrix::Zero(static_cast<Eigen::Index>(s.out_dim), static_cast<Eigen::Index>(s.in_dim)),
                            Vector::Zero(static_cast<Eigen::Index>(s.out_dim))});
    return p;
}

namespace {

void apply_activation(Activation a, Matrix& z) {
    if (a == Activation::tanh) z = z.array().tanh().matrix();
}

void check_input(const NetworkSpec& spec, const ParameterSet& params, Eigen::Index cols) {
    params.check_shapes(spec);
    if (static_cast<std::size_t>(cols) != spec.input_dim())
        throw DimensionError("input dimension " + std::to_string(cols) + " does not match spec input " +
                             std::to_string(spec.input_dim()));
}

// Layer outputs after activation, index 0 is the input itself.
std::vector<Matrix> forward_all(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs) {
    std::vector<Matrix> acts;
    acts.reserve(spec.layers.size() + 1);
    acts.push_back(inputs);
    for (std::size_t k = 0; k < spec.layers.size(); ++k) {
        const auto& l = params.layers[k];
        Matrix z = acts.back() * l.weight.transpose();
        z.rowwise() += l.bias.transpose();
        apply_activation(spec.layers[k].activation, z);
        acts.push_back(std::move(z));
    }
    return acts;
}

}  // namespace

double forward(const NetworkSpec& spec, const ParameterSet& params, std::span<const double> input) {
    check_input(spec, params, static_cast<Eigen::Index>(input.size()));
    Vector a = Eigen::Map<const Vector>(input.data(), static_cast<Eigen::Index>(input.size()));
    for (std::size_t k = 0; k < spec.layers.size(); ++k) {
        const auto& l = params.layers[k];
        Vector z = l.weight * a + l.bias;
        if (spec.layers[k].activation == Activation::tanh) z = z.array().tanh().matrix();
        a = std::move(z);
    }
    return a(0);
}

Vector forward_batch(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs) {
    check_input(spec, params, inputs.cols());
    auto acts = forward_all(spec, params, inputs);
    return acts.back().col(0);
}

double loss(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch, double lambda) {
    if (batch.size() == 0) throw DimensionError("loss of an empty batch");
    const Vector pred = forward_batch(spec, params, batch.inputs);
    const double mse = (pred - batch.targets).squaredNorm() / static_cast<double>(batch.size());
    return mse + 0.5 * lambda * params.squared_norm();
}

double loss_and_grad(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch,
                     double lambda, Gradients& out) {
    if (batch.size() == 0) throw DimensionError("gradient of an empty batch");
    check_input(spec, params, batch.inputs.cols());
    const auto acts = forward_all(spec, params, batch.inputs);
    const double m = static_cast<double>(batch.size());

    const Vector residual = acts.back().col(0) - batch.targets;
    const double value = residual.squaredNorm() / m + 0.5 * lambda * params.squared_norm();

    const std::size_t n_layers = spec.layers.size();
    out.spec_hash = params.spec_hash;
    out.layers.resize(n_layers);
    // dL/dz of the identity output layer
    Matrix delta = (2.0 / m) * residual;
    for (std::size_t k = n_layers; k-- > 0;) {
        const auto& l = params.layers[k];
        auto& g = out.layers[k];
        g.weight.noalias() = delta.transpose() * acts[k];
        g.bias = delta.colwise().sum().transpose();
        if (lambda != 0.0) {
            g.weight += lambda * l.weight;
            g.bias += lambda * l.bias;
        }
        if (k > 0) {
            Matrix back = delta * l.weight;
            if (spec.layers[k - 1].activation == Activation::tanh)
                back.array() *= 1.0 - acts[k].array().square();
            delta = std::move(back);
        }
    }
    return value;
}

Gradients grad(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch, double lambda) {
    Gradients g;
    loss_and_grad(spec, params, batch, lambda, g);
    return g;
}

void sgd_step_inplace(ParameterSet& params, const Gradients& grads, double lr, std::size_t frozen_prefix) {
    check_same_shape(params, grads);
    if (frozen_prefix >= params.layers.size())
        throw DimensionError("frozen prefix must leave at least one trainable layer");
    for (std::size_t k = frozen_prefix; k < params.layers.size(); ++k) {
        params.layers[k].weight -= lr * grads.layers[k].weight;
        params.layers[k].bias -= lr * grads.layers[k].bias;
    }
}

ParameterSet sgd_step(const ParameterSet& params, const Gradients& grads, double lr, std::size_t frozen_prefix) {
    ParameterSet next = params;
    sgd_step_inplace(next, grads, lr, frozen_prefix);
    return next;
}

double gradient_check(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch,
                      double lambda, const Gradients& grads) {
    check_same_shape(params, grads);
    ParameterSet probe = params;
    double worst = 0.0;
    auto visit = [&](double* values, const double* analytic, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) {
            const double saved = values[i];
            values[i] = saved + kGradCheckStep;
            const double up = loss(spec, probe, batch, lambda);
            values[i] = saved - kGradCheckStep;
            const double down = loss(spec, probe, batch, lambda);
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * kGradCheckStep);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kGradCheckFloor});
            worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
        }
    };
    for (std::size_t k = 0; k < probe.layers.size(); ++k) {
        visit(probe.layers[k].weight.data(), grads.layers[k].weight.data(), probe.layers[k].weight.size());
        visit(probe.layers[k].bias.data(), grads.layers[k].bias.data(), probe.layers[k].bias.size());
    }
    return worst;
}

double gradient_check(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch, double lambda) {
    return gradient_check(spec, params, batch, lambda, grad(spec, params, batch, lambda));
}

std::string serialize_params(const ParameterSet& params) {
    if (!params.all_finite()) throw RangeError("cannot serialize non-finite parameters");
    json layers = json::array();
    for (const auto& l : params.layers) {
        const auto w = codec::pack_f64_le({l.weight.data(), static_cast<std::size_t>(l.weight.size())});
        const auto b = codec::pack_f64_le({l.bias.data(), static_cast<std::size_t>(l.bias.size())});
        layers.push_back({{"w_b64", codec::base64_encode(w)}, {"b_b64", codec::base64_encode(b)}});
    }
    json env = {{"format_version", kParamFormatVersion}, {"spec_hash", params.spec_hash}, {"layers", layers}};
    return env.dump();
}

namespace {

const json& require(const json& obj, const char* key, json::value_t type) {
    auto it = obj.find(key);
    if (it == obj.end()) throw DecodeError(std::string("parameter envelope: missing '") + key + "'");
    if (it->type() != type &&
        !(type == json::value_t::number_integer && it->type() == json::value_t::number_unsigned))
        throw DecodeError(std::string("parameter envelope: '") + key + "' has the wrong type");
    return *it;
}

}  // namespace

DecodedParams deserialize_params(std::string_view bytes) {
    json env;
    try {
        env = json::parse(bytes);
    } catch (const json::exception& e) {
        throw DecodeError(std::string("parameter envelope: malformed JSON: ") + e.what());
    }
    if (!env.is_object()) throw DecodeError("parameter envelope: not an object");
    const auto version = require(env, "format_version", json::value_t::number_integer).get<std::int64_t>();
    if (version != kParamFormatVersion)
        throw VersionMismatch("parameter envelope: format_version " + std::to_string(version) +
                              " is not supported (expected " + std::to_string(kParamFormatVersion) + ")");
    DecodedParams out;
    out.spec_hash = require(env, "spec_hash", json::value_t::string).get<std::string>();
    const auto& layers = require(env, "layers", json::value_t::array);
    if (layers.empty()) throw DecodeError("parameter envelope: no layers");

    out.params.spec_hash = out.spec_hash;
    for (const auto& jl : layers) {
        if (!jl.is_object()) throw DecodeError("parameter envelope: layer is not an object");
        const auto w = codec::unpack_f64_le(codec::base64_decode(require(jl, "w_b64", json::value_t::string).get<std::string>()));
        const auto b = codec::unpack_f64_le(codec::base64_decode(require(jl, "b_b64", json::value_t::string).get<std::string>()));
        if (b.empty() || w.empty() || w.size() % b.size() != 0)
            throw DecodeError("parameter envelope: weight/bias lengths are inconsistent");
        const auto rows = static_cast<Eigen::Index>(b.size());
        const auto cols = static_cast<Eigen::Index>(w.size() / b.size());
        if (!out.params.layers.empty() && out.params.layers.back().weight.rows() != cols)
            throw DecodeError("parameter envelope: layers do not chain");
        Layer l;
        l.weight = Eigen::Map<const Matrix>(w.data(), rows, cols);
        l.bias = Eigen::Map<const Vector>(b.data(), rows);
        out.params.layers.push_back(std::move(l));
    }
    if (!out.params.all_finite()) throw DecodeError("parameter envelope: non-finite value");
    return out;
}

ParameterSet deserialize_params(std::string_view bytes, const NetworkSpec& spec) {
    auto decoded = deserialize_params(bytes);
    if (decoded.spec_hash != spec.hash())
        throw SpecError("parameter envelope spec_hash does not match the expected network spec");
    decoded.params.check_shapes(spec);
    return std::move(decoded.params);
}

}  // namespace fedimit::nn
