#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracer/rng.hpp"
#include "tracer/tensor.hpp"

namespace tracer {

enum class LayerKind {
    dense,
    conv2d,
    conv2d_transpose,
    relu,
    leaky_relu,
    sigmoid,
    maxpool2d,
    flatten,
    reshape,
    softmax,
};

std::string layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

// Parameter gradients keyed by "L<index>.<name>".
class Gradients {
public:
    Tensor& slot(const std::string& key, const std::vector<std::size_t>& shape);
    const Tensor* find(const std::string& key) const;
    const std::map<std::string, Tensor>& all() const { return grads_; }
    void clear() { grads_.clear(); }

private:
    std::map<std::string, Tensor> grads_;
};

struct ParamRef {
    std::string key;
    Tensor* value;
};

// One network layer. Forward and backward operate on batched tensors
// (leading batch dimension); shapes below exclude the batch dim.
class Layer {
public:
    virtual ~Layer() = default;

    virtual LayerKind kind() const = 0;
    virtual std::string name() const = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;

    // Fixes input/output shapes; throws ValidationError on mismatch.
    virtual void bind(const std::vector<std::size_t>& input_shape) = 0;
    const std::vector<std::size_t>& input_shape() const { return input_shape_; }
    const std::vector<std::size_t>& output_shape() const { return output_shape_; }

    virtual Tensor forward(const Tensor& input) const = 0;

    // Returns grad wrt input; accumulates parameter grads under key_prefix.
    virtual Tensor backward(const Tensor& input, const Tensor& output, const Tensor& grad_output,
                            const std::string& key_prefix, Gradients* grads) const = 0;

    virtual std::vector<ParamRef> params(const std::string& key_prefix) { return {}; }
    virtual void init_params(Rng& rng) {}

    virtual std::size_t param_count() const { return 0; }
    virtual std::size_t flops_per_sample() const = 0;

    // Kind-specific hyperparameters for the model container header.
    virtual nlohmann::ordered_json header() const = 0;

protected:
    std::vector<std::size_t> input_shape_;
    std::vector<std::size_t> output_shape_;
};

std::unique_ptr<Layer> make_dense(std::size_t units);
std::unique_ptr<Layer> make_conv2d(std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                                   std::size_t padding = 0);
std::unique_ptr<Layer> make_conv2d_transpose(std::size_t out_channels, std::size_t kernel,
                                             std::size_t stride = 1, std::size_t padding = 0);
std::unique_ptr<Layer> make_relu();
std::unique_ptr<Layer> make_leaky_relu(double slope = 0.01);
std::unique_ptr<Layer> make_sigmoid();
std::unique_ptr<Layer> make_maxpool2d(std::size_t window, std::size_t stride = 0);  // stride 0 = window
std::unique_ptr<Layer> make_flatten();
std::unique_ptr<Layer> make_reshape(std::vector<std::size_t> target);
std::unique_ptr<Layer> make_softmax();
std::unique_ptr<Layer> layer_from_header(const nlohmann::ordered_json& j);

struct ForwardResult {
    Tensor final;
    std::map<std::size_t, Tensor> taps;  // layer index -> batched output
};

// Per-layer outputs recorded for backprop.
struct ForwardTrace {
    Tensor input;
    std::vector<Tensor> outputs;  // outputs[i] = output of layer i
};

// Ordered layer stack with activation taps. Tapping is observation-only:
// the final output is the same tensor either way.
class TappedModel {
public:
    TappedModel() = default;
    TappedModel(std::vector<std::size_t> input_shape, std::vector<std::unique_ptr<Layer>> layers);
    TappedModel(std::vector<std::size_t> input_shape, std::vector<std::unique_ptr<Layer>> layers,
                std::vector<std::size_t> tap_points);

    TappedModel(const TappedModel& other);
    TappedModel& operator=(const TappedModel& other);
    TappedModel(TappedModel&&) = default;
    TappedModel& operator=(TappedModel&&) = default;

    const std::vector<std::size_t>& input_shape() const { return input_shape_; }
    const std::vector<std::size_t>& output_shape() const;
    std::size_t layer_count() const { return layers_.size(); }
    const Layer& layer(std::size_t i) const { return *layers_[i]; }
    const std::vector<std::size_t>& tap_points() const { return tap_points_; }
    void set_tap_points(std::vector<std::size_t> taps);

    std::uint64_t seed() const { return seed_; }
    void set_seed(std::uint64_t seed) { seed_ = seed; }

    // Human-readable label of the block ending at tap index t.
    std::string tap_label(std::size_t t) const;

    ForwardResult forward(const Tensor& batch) const;
    Tensor forward_final(const Tensor& batch) const;
    std::vector<int> predict(const Tensor& batch) const;

    ForwardTrace forward_trace(const Tensor& batch) const;
    // Backprop grad_final through all layers; returns grad wrt the input.
    Tensor backward(const ForwardTrace& trace, const Tensor& grad_final, Gradients& grads) const;

    std::vector<ParamRef> params();
    void init_params(std::uint64_t seed);

    std::size_t param_count() const;
    std::size_t flops_per_sample() const;

    nlohmann::ordered_json architecture_header() const;

private:
    void bind_all();
    void validate_taps() const;

    std::vector<std::size_t> input_shape_;
    std::vector<std::unique_ptr<Layer>> layers_;
    std::vector<std::size_t> tap_points_;
    std::uint64_t seed_ = 0;
};

// Post-activation block outputs: dense/conv/pool ends (activations and
// reshapes fold into the preceding block), final softmax excluded.
std::vector<std::size_t> default_tap_points(const std::vector<std::unique_ptr<Layer>>& layers);

}  // namespace tracer
