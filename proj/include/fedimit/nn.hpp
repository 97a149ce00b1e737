#pragma once

// Small dense feedforward networks with exact backpropagation.
//
// A network is a chain of affine layers, each followed by tanh or identity.
// The output is a single scalar. All arithmetic is 64-bit.

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedimit::nn {

enum class Activation { tanh, identity };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view s);

struct LayerSpec {
    std::size_t in_dim = 1;
    std::size_t out_dim = 1;
    Activation activation = Activation::identity;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
    std::vector<LayerSpec> layers;
    /// Number of leading layers that form the feature extractor.
    std::size_t feature_prefix_len = 0;

    /// Throws SpecError when the chain is inconsistent.
    void validate() const;

    std::size_t input_dim() const { return layers.front().in_dim; }
    std::size_t parameter_count() const;

    /// Canonical text form; the spec hash is its SHA-256.
    std::string canonical() const;
    std::string hash() const;

    /// input -> hidden... (tanh) -> 1 (identity).
    static NetworkSpec dense(std::size_t input_dim, std::span<const std::size_t> hidden,
                             std::size_t feature_prefix_len);

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// input -> 32 -> 32 -> 16 -> 1 with the first two layers as features.
NetworkSpec default_spec(std::size_t input_dim);

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct Layer {
    Matrix weight;  // out_dim x in_dim
    Vector bias;    // out_dim
};

/// Weights and biases of one network. The only thing agents and cloud exchange.
struct ParameterSet {
    std::string spec_hash;
    std::vector<Layer> layers;

    std::size_t parameter_count() const;
    /// Sum of squares of every weight and bias.
    double squared_norm() const;
    bool all_finite() const;
    /// Throws DimensionError unless shapes match `spec`.
    void check_shapes(const NetworkSpec& spec) const;
};

/// Same layout as ParameterSet; spec_hash unused.
using Gradients = ParameterSet;

/// Bitwise equality of every value (distinguishes -0.0 from 0.0).
bool bit_identical(const ParameterSet& a, const ParameterSet& b);
bool bit_identical(const Layer& a, const Layer& b);

/// Rows of `inputs` are samples.
struct Batch {
    Matrix inputs;
    Vector targets;

    Batch() = default;
    Batch(Matrix x, Vector y);
    Batch(const std::vector<std::vector<double>>& x, const std::vector<double>& y);

    std::size_t size() const { return static_cast<std::size_t>(targets.size()); }
};

/// Xavier-uniform weights, zero biases. Same seed gives identical bits.
ParameterSet init_params(const NetworkSpec& spec, std::uint64_t seed);

/// All-zero parameters with the right shapes.
ParameterSet zero_params(const NetworkSpec& spec);

double forward(const NetworkSpec& spec, const ParameterSet& params, std::span<const double> input);

/// Predictions for every row of `inputs`.
Vector forward_batch(const NetworkSpec& spec, const ParameterSet& params, const Matrix& inputs);

/// (1/M) sum (f(x) - y)^2 + (lambda/2) |theta|^2, biases included in the norm.
double loss(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch, double lambda);

Gradients grad(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch,
               double lambda);

/// Loss and gradient in one pass.
double loss_and_grad(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch,
                     double lambda, Gradients& out);

/// theta <- theta - lr * g for layers at index >= frozen_prefix; the frozen
/// layers are copied unchanged.
ParameterSet sgd_step(const ParameterSet& params, const Gradients& grads, double lr,
                      std::size_t frozen_prefix);

/// In-place variant used by training loops.
void sgd_step_inplace(ParameterSet& params, const Gradients& grads, double lr,
                      std::size_t frozen_prefix);

/// Relative error used by the gradient check:
/// |a - b| / max(|a|, |b|, kGradCheckFloor).
inline constexpr double kGradCheckFloor = 1e-3;
inline constexpr double kGradCheckStep = 1e-6;

/// Worst relative error between `grads` and central finite differences of
/// `loss` over every parameter.
double gradient_check(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch,
                      double lambda, const Gradients& grads);
double gradient_check(const NetworkSpec& spec, const ParameterSet& params, const Batch& batch,
                      double lambda);

inline constexpr int kParamFormatVersion = 1;

/// JSON envelope {format_version, spec_hash, layers:[{w_b64, b_b64}]}, values
/// as base64 of little-endian doubles in row-major order.
std::string serialize_params(const ParameterSet& params);

struct DecodedParams {
    std::string spec_hash;
    ParameterSet params;
};

/// Throws DecodeError / VersionMismatch.
DecodedParams deserialize_params(std::string_view bytes);

/// Deserializes and checks the hash and shapes against `spec`.
ParameterSet deserialize_params(std::string_view bytes, const NetworkSpec& spec);

}  // namespace fedimit::nn
