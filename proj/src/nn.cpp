#include "tracer/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tracer/errors.hpp"

namespace tracer {

namespace {

using ojson = nlohmann::ordered_json;

std::string mismatch_msg(const std::string& layer_name, std::size_t layer_index,
                         const std::vector<std::size_t>& expected, const std::vector<std::size_t>& got) {
    std::ostringstream os;
    os << "layer " << layer_index << " (" << layer_name << "): expected input " << shape_to_string(expected)
       << ", got " << shape_to_string(got);
    return os.str();
}

std::vector<std::size_t> batch_item_shape(const Tensor& batch) {
    if (batch.rank() < 2) throw ValidationError("expected a batched tensor (leading batch dimension)");
    return {batch.shape().begin() + 1, batch.shape().end()};
}

Tensor with_batch(const Tensor& batch, const std::vector<std::size_t>& item_shape) {
    std::vector<std::size_t> s;
    s.push_back(batch.dim(0));
    s.insert(s.end(), item_shape.begin(), item_shape.end());
    return Tensor(std::move(s));
}

void init_fan_in_uniform(Tensor& w, std::size_t fan_in, Rng& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------- dense

class DenseLayer final : public Layer {
public:
    explicit DenseLayer(std::size_t units) : units_(units) {}

    LayerKind kind() const override { return LayerKind::dense; }

    std::string name() const override {
        std::ostringstream os;
        os << "dense(" << in_ << "->" << units_ << ")";
        return os.str();
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<DenseLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        if (input_shape.size() != 1) {
            throw ValidationError("dense layer requires a rank-1 input, got " + shape_to_string(input_shape) +
                                  " (insert flatten)");
        }
        input_shape_ = input_shape;
        in_ = input_shape[0];
        output_shape_ = {units_};
        std::vector<std::size_t> wshape{units_, in_};
        if (weight_.empty()) {
            weight_ = Tensor(wshape);
            bias_ = Tensor({units_});
        } else if (weight_.shape() != wshape) {
            throw ValidationError("dense weight shape " + shape_to_string(weight_.shape()) +
                                  " does not match bound input " + shape_to_string(input_shape));
        }
    }

    Tensor forward(const Tensor& input) const override {
        std::size_t n = input.dim(0);
        Tensor out({n, units_});
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * in_;
            double* y = out.data() + r * units_;
            for (std::size_t o = 0; o < units_; ++o) {
                const double* w = weight_.data() + o * in_;
                double acc = bias_[o];
                for (std::size_t i = 0; i < in_; ++i) acc += w[i] * x[i];
                y[o] = acc;
            }
        }
        return out;
    }

    Tensor backward(const Tensor& input, const Tensor&, const Tensor& grad_output,
                    const std::string& key_prefix, Gradients* grads) const override {
        std::size_t n = input.dim(0);
        Tensor gx({n, in_});
        Tensor* gw = nullptr;
        Tensor* gb = nullptr;
        if (grads) {
            gw = &grads->slot(key_prefix + ".weight", weight_.shape());
            gb = &grads->slot(key_prefix + ".bias", bias_.shape());
        }
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * in_;
            const double* g = grad_output.data() + r * units_;
            double* gxr = gx.data() + r * in_;
            for (std::size_t o = 0; o < units_; ++o) {
                const double* w = weight_.data() + o * in_;
                double go = g[o];
                for (std::size_t i = 0; i < in_; ++i) gxr[i] += go * w[i];
                if (gw) {
                    double* gwr = gw->data() + o * in_;
                    for (std::size_t i = 0; i < in_; ++i) gwr[i] += go * x[i];
                    (*gb)[o] += go;
                }
            }
        }
        return gx;
    }

    std::vector<ParamRef> params(const std::string& key_prefix) override {
        return {{key_prefix + ".weight", &weight_}, {key_prefix + ".bias", &bias_}};
    }

    void init_params(Rng& rng) override {
        init_fan_in_uniform(weight_, in_, rng);
        for (std::size_t i = 0; i < bias_.size(); ++i) bias_[i] = 0.0;
    }

    std::size_t param_count() const override { return weight_.size() + bias_.size(); }
    std::size_t flops_per_sample() const override { return in_ * units_ + units_; }

    ojson header() const override { return ojson{{"kind", "dense"}, {"units", units_}}; }

private:
    std::size_t units_;
    std::size_t in_ = 0;
    Tensor weight_;  // units x in
    Tensor bias_;    // units
};

// ---------------------------------------------------------------- conv2d

class Conv2dLayer final : public Layer {
public:
    Conv2dLayer(std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t padding)
        : co_(out_channels), k_(kernel), s_(stride), p_(padding) {}

    LayerKind kind() const override { return LayerKind::conv2d; }

    std::string name() const override {
        std::ostringstream os;
        os << "conv2d(" << ci_ << "->" << co_ << ",k" << k_ << ",s" << s_ << ",p" << p_ << ")";
        return os.str();
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2dLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        if (input_shape.size() != 3) {
            throw ValidationError("conv2d requires a CxHxW input, got " + shape_to_string(input_shape));
        }
        input_shape_ = input_shape;
        ci_ = input_shape[0];
        h_ = input_shape[1];
        w_ = input_shape[2];
        if (h_ + 2 * p_ < k_ || w_ + 2 * p_ < k_) {
            throw ValidationError("conv2d kernel " + std::to_string(k_) + " exceeds padded input " +
                                  shape_to_string(input_shape));
        }
        oh_ = (h_ + 2 * p_ - k_) / s_ + 1;
        ow_ = (w_ + 2 * p_ - k_) / s_ + 1;
        output_shape_ = {co_, oh_, ow_};
        std::vector<std::size_t> wshape{co_, ci_, k_, k_};
        if (weight_.empty()) {
            weight_ = Tensor(wshape);
            bias_ = Tensor({co_});
        } else if (weight_.shape() != wshape) {
            throw ValidationError("conv2d weight shape mismatch for input " + shape_to_string(input_shape));
        }
    }

    Tensor forward(const Tensor& input) const override {
        std::size_t n = input.dim(0);
        Tensor out({n, co_, oh_, ow_});
        const std::size_t in_stride = ci_ * h_ * w_;
        const std::size_t out_stride = co_ * oh_ * ow_;
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * in_stride;
            double* y = out.data() + r * out_stride;
            for (std::size_t oc = 0; oc < co_; ++oc) {
                for (std::size_t oy = 0; oy < oh_; ++oy) {
                    for (std::size_t ox = 0; ox < ow_; ++ox) {
                        double acc = bias_[oc];
                        for (std::size_t ic = 0; ic < ci_; ++ic) {
                            for (std::size_t ky = 0; ky < k_; ++ky) {
                                std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s_ + ky) -
                                                    static_cast<std::ptrdiff_t>(p_);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h_)) continue;
                                for (std::size_t kx = 0; kx < k_; ++kx) {
                                    std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s_ + kx) -
                                                        static_cast<std::ptrdiff_t>(p_);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w_)) continue;
                                    acc += weight_[((oc * ci_ + ic) * k_ + ky) * k_ + kx] *
                                           x[(ic * h_ + iy) * w_ + ix];
                                }
                            }
                        }
                        y[(oc * oh_ + oy) * ow_ + ox] = acc;
                    }
                }
            }
        }
        return out;
    }

    Tensor backward(const Tensor& input, const Tensor&, const Tensor& grad_output,
                    const std::string& key_prefix, Gradients* grads) const override {
        std::size_t n = input.dim(0);
        Tensor gx(input.shape());
        Tensor* gw = nullptr;
        Tensor* gb = nullptr;
        if (grads) {
            gw = &grads->slot(key_prefix + ".weight", weight_.shape());
            gb = &grads->slot(key_prefix + ".bias", bias_.shape());
        }
        const std::size_t in_stride = ci_ * h_ * w_;
        const std::size_t out_stride = co_ * oh_ * ow_;
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * in_stride;
            const double* g = grad_output.data() + r * out_stride;
            double* gxr = gx.data() + r * in_stride;
            for (std::size_t oc = 0; oc < co_; ++oc) {
                for (std::size_t oy = 0; oy < oh_; ++oy) {
                    for (std::size_t ox = 0; ox < ow_; ++ox) {
                        double go = g[(oc * oh_ + oy) * ow_ + ox];
                        if (gb) (*gb)[oc] += go;
                        for (std::size_t ic = 0; ic < ci_; ++ic) {
                            for (std::size_t ky = 0; ky < k_; ++ky) {
                                std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s_ + ky) -
                                                    static_cast<std::ptrdiff_t>(p_);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h_)) continue;
                                for (std::size_t kx = 0; kx < k_; ++kx) {
                                    std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s_ + kx) -
                                                        static_cast<std::ptrdiff_t>(p_);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w_)) continue;
                                    std::size_t wi = ((oc * ci_ + ic) * k_ + ky) * k_ + kx;
                                    std::size_t xi = (ic * h_ + iy) * w_ + ix;
                                    gxr[xi] += weight_[wi] * go;
                                    if (gw) (*gw)[wi] += x[xi] * go;
                                }
                            }
                        }
                    }
                }
            }
        }
        return gx;
    }

    std::vector<ParamRef> params(const std::string& key_prefix) override {
        return {{key_prefix + ".weight", &weight_}, {key_prefix + ".bias", &bias_}};
    }

    void init_params(Rng& rng) override {
        init_fan_in_uniform(weight_, ci_ * k_ * k_, rng);
        for (std::size_t i = 0; i < bias_.size(); ++i) bias_[i] = 0.0;
    }

    std::size_t param_count() const override { return weight_.size() + bias_.size(); }

    std::size_t flops_per_sample() const override {
        return k_ * k_ * ci_ * co_ * oh_ * ow_ + co_ * oh_ * ow_;
    }

    ojson header() const override {
        return ojson{{"kind", "conv2d"}, {"out_channels", co_}, {"kernel", k_}, {"stride", s_}, {"padding", p_}};
    }

private:
    std::size_t co_, k_, s_, p_;
    std::size_t ci_ = 0, h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
    Tensor weight_;  // co x ci x k x k
    Tensor bias_;    // co
};

// ------------------------------------------------------- conv2d_transpose

class ConvTranspose2dLayer final : public Layer {
public:
    ConvTranspose2dLayer(std::size_t out_channels, std::size_t kernel, std::size_t stride, std::size_t padding)
        : co_(out_channels), k_(kernel), s_(stride), p_(padding) {}

    LayerKind kind() const override { return LayerKind::conv2d_transpose; }

    std::string name() const override {
        std::ostringstream os;
        os << "conv2d_t(" << ci_ << "->" << co_ << ",k" << k_ << ",s" << s_ << ",p" << p_ << ")";
        return os.str();
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<ConvTranspose2dLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        if (input_shape.size() != 3) {
            throw ValidationError("conv2d_transpose requires a CxHxW input, got " + shape_to_string(input_shape));
        }
        input_shape_ = input_shape;
        ci_ = input_shape[0];
        h_ = input_shape[1];
        w_ = input_shape[2];
        std::ptrdiff_t oh = static_cast<std::ptrdiff_t>((h_ - 1) * s_ + k_) - 2 * static_cast<std::ptrdiff_t>(p_);
        std::ptrdiff_t ow = static_cast<std::ptrdiff_t>((w_ - 1) * s_ + k_) - 2 * static_cast<std::ptrdiff_t>(p_);
        if (oh <= 0 || ow <= 0) {
            throw ValidationError("conv2d_transpose output collapses for input " + shape_to_string(input_shape));
        }
        oh_ = static_cast<std::size_t>(oh);
        ow_ = static_cast<std::size_t>(ow);
        output_shape_ = {co_, oh_, ow_};
        std::vector<std::size_t> wshape{ci_, co_, k_, k_};
        if (weight_.empty()) {
            weight_ = Tensor(wshape);
            bias_ = Tensor({co_});
        } else if (weight_.shape() != wshape) {
            throw ValidationError("conv2d_transpose weight shape mismatch for input " + shape_to_string(input_shape));
        }
    }

    Tensor forward(const Tensor& input) const override {
        std::size_t n = input.dim(0);
        Tensor out({n, co_, oh_, ow_});
        const std::size_t in_stride = ci_ * h_ * w_;
        const std::size_t out_stride = co_ * oh_ * ow_;
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * in_stride;
            double* y = out.data() + r * out_stride;
            for (std::size_t oc = 0; oc < co_; ++oc) {
                for (std::size_t i = 0; i < oh_ * ow_; ++i) y[oc * oh_ * ow_ + i] = bias_[oc];
            }
            for (std::size_t ic = 0; ic < ci_; ++ic) {
                for (std::size_t iy = 0; iy < h_; ++iy) {
                    for (std::size_t ix = 0; ix < w_; ++ix) {
                        double xv = x[(ic * h_ + iy) * w_ + ix];
                        for (std::size_t oc = 0; oc < co_; ++oc) {
                            for (std::size_t ky = 0; ky < k_; ++ky) {
                                std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * s_ + ky) -
                                                    static_cast<std::ptrdiff_t>(p_);
                                if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(oh_)) continue;
                                for (std::size_t kx = 0; kx < k_; ++kx) {
                                    std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * s_ + kx) -
                                                        static_cast<std::ptrdiff_t>(p_);
                                    if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(ow_)) continue;
                                    y[(oc * oh_ + oy) * ow_ + ox] +=
                                        weight_[((ic * co_ + oc) * k_ + ky) * k_ + kx] * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        return out;
    }

    Tensor backward(const Tensor& input, const Tensor&, const Tensor& grad_output,
                    const std::string& key_prefix, Gradients* grads) const override {
        std::size_t n = input.dim(0);
        Tensor gx(input.shape());
        Tensor* gw = nullptr;
        Tensor* gb = nullptr;
        if (grads) {
            gw = &grads->slot(key_prefix + ".weight", weight_.shape());
            gb = &grads->slot(key_prefix + ".bias", bias_.shape());
        }
        const std::size_t in_stride = ci_ * h_ * w_;
        const std::size_t out_stride = co_ * oh_ * ow_;
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * in_stride;
            const double* g = grad_output.data() + r * out_stride;
            double* gxr = gx.data() + r * in_stride;
            if (gb) {
                for (std::size_t oc = 0; oc < co_; ++oc) {
                    for (std::size_t i = 0; i < oh_ * ow_; ++i) (*gb)[oc] += g[oc * oh_ * ow_ + i];
                }
            }
            for (std::size_t ic = 0; ic < ci_; ++ic) {
                for (std::size_t iy = 0; iy < h_; ++iy) {
                    for (std::size_t ix = 0; ix < w_; ++ix) {
                        double xv = x[(ic * h_ + iy) * w_ + ix];
                        double acc = 0.0;
                        for (std::size_t oc = 0; oc < co_; ++oc) {
                            for (std::size_t ky = 0; ky < k_; ++ky) {
                                std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * s_ + ky) -
                                                    static_cast<std::ptrdiff_t>(p_);
                                if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(oh_)) continue;
                                for (std::size_t kx = 0; kx < k_; ++kx) {
                                    std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * s_ + kx) -
                                                        static_cast<std::ptrdiff_t>(p_);
                                    if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(ow_)) continue;
                                    std::size_t wi = ((ic * co_ + oc) * k_ + ky) * k_ + kx;
                                    double go = g[(oc * oh_ + oy) * ow_ + ox];
                                    acc += weight_[wi] * go;
                                    if (gw) (*gw)[wi] += xv * go;
                                }
                            }
                        }
                        gxr[(ic * h_ + iy) * w_ + ix] = acc;
                    }
                }
            }
        }
        return gx;
    }

    std::vector<ParamRef> params(const std::string& key_prefix) override {
        return {{key_prefix + ".weight", &weight_}, {key_prefix + ".bias", &bias_}};
    }

    void init_params(Rng& rng) override {
        init_fan_in_uniform(weight_, ci_ * k_ * k_, rng);
        for (std::size_t i = 0; i < bias_.size(); ++i) bias_[i] = 0.0;
    }

    std::size_t param_count() const override { return weight_.size() + bias_.size(); }

    std::size_t flops_per_sample() const override {
        return k_ * k_ * ci_ * co_ * h_ * w_ + co_ * oh_ * ow_;
    }

    ojson header() const override {
        return ojson{{"kind", "conv2d_transpose"},
                     {"out_channels", co_},
                     {"kernel", k_},
                     {"stride", s_},
                     {"padding", p_}};
    }

private:
    std::size_t co_, k_, s_, p_;
    std::size_t ci_ = 0, h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
    Tensor weight_;  // ci x co x k x k
    Tensor bias_;    // co
};

// ----------------------------------------------------------- activations

class ReluLayer final : public Layer {
public:
    LayerKind kind() const override { return LayerKind::relu; }
    std::string name() const override { return "relu"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        input_shape_ = input_shape;
        output_shape_ = input_shape;
    }

    Tensor forward(const Tensor& input) const override {
        Tensor out(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
        return out;
    }

    Tensor backward(const Tensor& input, const Tensor&, const Tensor& grad_output, const std::string&,
                    Gradients*) const override {
        Tensor gx(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) gx[i] = input[i] > 0.0 ? grad_output[i] : 0.0;
        return gx;
    }

    std::size_t flops_per_sample() const override { return shape_product(output_shape_); }
    ojson header() const override { return ojson{{"kind", "relu"}}; }
};

class LeakyReluLayer final : public Layer {
public:
    explicit LeakyReluLayer(double slope) : slope_(slope) {}

    LayerKind kind() const override { return LayerKind::leaky_relu; }

    std::string name() const override {
        std::ostringstream os;
        os << "leaky_relu(" << slope_ << ")";
        return os.str();
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<LeakyReluLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        input_shape_ = input_shape;
        output_shape_ = input_shape;
    }

    Tensor forward(const Tensor& input) const override {
        Tensor out(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : slope_ * input[i];
        return out;
    }

    Tensor backward(const Tensor& input, const Tensor&, const Tensor& grad_output, const std::string&,
                    Gradients*) const override {
        Tensor gx(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) gx[i] = input[i] > 0.0 ? grad_output[i] : slope_ * grad_output[i];
        return gx;
    }

    std::size_t flops_per_sample() const override { return shape_product(output_shape_); }
    ojson header() const override { return ojson{{"kind", "leaky_relu"}, {"slope", slope_}}; }

private:
    double slope_;
};

class SigmoidLayer final : public Layer {
public:
    LayerKind kind() const override { return LayerKind::sigmoid; }
    std::string name() const override { return "sigmoid"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<SigmoidLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        input_shape_ = input_shape;
        output_shape_ = input_shape;
    }

    Tensor forward(const Tensor& input) const override {
        Tensor out(input.shape());
        for (std::size_t i = 0; i < input.size(); ++i) {
            double x = input[i];
            if (x >= 0.0) {
                out[i] = 1.0 / (1.0 + std::exp(-x));
            } else {
                double e = std::exp(x);
                out[i] = e / (1.0 + e);
            }
        }
        return out;
    }

    Tensor backward(const Tensor&, const Tensor& output, const Tensor& grad_output, const std::string&,
                    Gradients*) const override {
        Tensor gx(output.shape());
        for (std::size_t i = 0; i < output.size(); ++i) gx[i] = grad_output[i] * output[i] * (1.0 - output[i]);
        return gx;
    }

    std::size_t flops_per_sample() const override { return shape_product(output_shape_); }
    ojson header() const override { return ojson{{"kind", "sigmoid"}}; }
};

// ------------------------------------------------------------- maxpool2d

class MaxPool2dLayer final : public Layer {
public:
    MaxPool2dLayer(std::size_t window, std::size_t stride) : win_(window), s_(stride == 0 ? window : stride) {}

    LayerKind kind() const override { return LayerKind::maxpool2d; }

    std::string name() const override {
        std::ostringstream os;
        os << "maxpool2d(w" << win_ << ",s" << s_ << ")";
        return os.str();
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPool2dLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        if (input_shape.size() != 3) {
            throw ValidationError("maxpool2d requires a CxHxW input, got " + shape_to_string(input_shape));
        }
        if (input_shape[1] < win_ || input_shape[2] < win_) {
            throw ValidationError("maxpool2d window " + std::to_string(win_) + " exceeds input " +
                                  shape_to_string(input_shape));
        }
        input_shape_ = input_shape;
        c_ = input_shape[0];
        h_ = input_shape[1];
        w_ = input_shape[2];
        oh_ = (h_ - win_) / s_ + 1;
        ow_ = (w_ - win_) / s_ + 1;
        output_shape_ = {c_, oh_, ow_};
    }

    Tensor forward(const Tensor& input) const override {
        std::size_t n = input.dim(0);
        Tensor out({n, c_, oh_, ow_});
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * c_ * h_ * w_;
            double* y = out.data() + r * c_ * oh_ * ow_;
            for (std::size_t c = 0; c < c_; ++c) {
                for (std::size_t oy = 0; oy < oh_; ++oy) {
                    for (std::size_t ox = 0; ox < ow_; ++ox) {
                        double best = -std::numeric_limits<double>::infinity();
                        for (std::size_t ky = 0; ky < win_; ++ky) {
                            for (std::size_t kx = 0; kx < win_; ++kx) {
                                double v = x[(c * h_ + oy * s_ + ky) * w_ + ox * s_ + kx];
                                if (v > best) best = v;
                            }
                        }
                        y[(c * oh_ + oy) * ow_ + ox] = best;
                    }
                }
            }
        }
        return out;
    }

    Tensor backward(const Tensor& input, const Tensor&, const Tensor& grad_output, const std::string&,
                    Gradients*) const override {
        std::size_t n = input.dim(0);
        Tensor gx(input.shape());
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * c_ * h_ * w_;
            const double* g = grad_output.data() + r * c_ * oh_ * ow_;
            double* gxr = gx.data() + r * c_ * h_ * w_;
            for (std::size_t c = 0; c < c_; ++c) {
                for (std::size_t oy = 0; oy < oh_; ++oy) {
                    for (std::size_t ox = 0; ox < ow_; ++ox) {
                        // gradient routes to the first maximum in scan order
                        double best = -std::numeric_limits<double>::infinity();
                        std::size_t best_idx = 0;
                        for (std::size_t ky = 0; ky < win_; ++ky) {
                            for (std::size_t kx = 0; kx < win_; ++kx) {
                                std::size_t idx = (c * h_ + oy * s_ + ky) * w_ + ox * s_ + kx;
                                if (x[idx] > best) {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        gxr[best_idx] += g[(c * oh_ + oy) * ow_ + ox];
                    }
                }
            }
        }
        return gx;
    }

    std::size_t flops_per_sample() const override { return (win_ * win_ - 1) * c_ * oh_ * ow_; }

    ojson header() const override { return ojson{{"kind", "maxpool2d"}, {"window", win_}, {"stride", s_}}; }

private:
    std::size_t win_, s_;
    std::size_t c_ = 0, h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
};

// ------------------------------------------------------ flatten / reshape

class FlattenLayer final : public Layer {
public:
    LayerKind kind() const override { return LayerKind::flatten; }
    std::string name() const override { return "flatten"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<FlattenLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        input_shape_ = input_shape;
        output_shape_ = {shape_product(input_shape)};
    }

    Tensor forward(const Tensor& input) const override {
        return input.reshaped({input.dim(0), output_shape_[0]});
    }

    Tensor backward(const Tensor& input, const Tensor&, const Tensor& grad_output, const std::string&,
                    Gradients*) const override {
        return grad_output.reshaped(input.shape());
    }

    std::size_t flops_per_sample() const override { return 0; }
    ojson header() const override { return ojson{{"kind", "flatten"}}; }
};

class ReshapeLayer final : public Layer {
public:
    explicit ReshapeLayer(std::vector<std::size_t> target) : target_(std::move(target)) {}

    LayerKind kind() const override { return LayerKind::reshape; }

    std::string name() const override { return "reshape(" + shape_to_string(target_) + ")"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ReshapeLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        if (shape_product(input_shape) != shape_product(target_)) {
            throw ValidationError("reshape target " + shape_to_string(target_) + " incompatible with input " +
                                  shape_to_string(input_shape));
        }
        input_shape_ = input_shape;
        output_shape_ = target_;
    }

    Tensor forward(const Tensor& input) const override {
        std::vector<std::size_t> s{input.dim(0)};
        s.insert(s.end(), target_.begin(), target_.end());
        return input.reshaped(std::move(s));
    }

    Tensor backward(const Tensor& input, const Tensor&, const Tensor& grad_output, const std::string&,
                    Gradients*) const override {
        return grad_output.reshaped(input.shape());
    }

    std::size_t flops_per_sample() const override { return 0; }
    ojson header() const override { return ojson{{"kind", "reshape"}, {"target", target_}}; }

private:
    std::vector<std::size_t> target_;
};

// ---------------------------------------------------------------- softmax

class SoftmaxLayer final : public Layer {
public:
    LayerKind kind() const override { return LayerKind::softmax; }
    std::string name() const override { return "softmax"; }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<SoftmaxLayer>(*this); }

    void bind(const std::vector<std::size_t>& input_shape) override {
        if (input_shape.size() != 1) {
            throw ValidationError("softmax requires a rank-1 input, got " + shape_to_string(input_shape));
        }
        input_shape_ = input_shape;
        output_shape_ = input_shape;
    }

    Tensor forward(const Tensor& input) const override {
        std::size_t n = input.dim(0);
        std::size_t k = input_shape_[0];
        Tensor out(input.shape());
        for (std::size_t r = 0; r < n; ++r) {
            const double* x = input.data() + r * k;
            double* y = out.data() + r * k;
            double m = x[0];
            for (std::size_t i = 1; i < k; ++i) m = std::max(m, x[i]);
            double sum = 0.0;
            for (std::size_t i = 0; i < k; ++i) {
                y[i] = std::exp(x[i] - m);
                sum += y[i];
            }
            for (std::size_t i = 0; i < k; ++i) y[i] /= sum;
        }
        return out;
    }

    Tensor backward(const Tensor&, const Tensor& output, const Tensor& grad_output, const std::string&,
                    Gradients*) const override {
        std::size_t n = output.dim(0);
        std::size_t k = output_shape_[0];
        Tensor gx(output.shape());
        for (std::size_t r = 0; r < n; ++r) {
            const double* p = output.data() + r * k;
            const double* g = grad_output.data() + r * k;
            double dot = 0.0;
            for (std::size_t i = 0; i < k; ++i) dot += g[i] * p[i];
            double* gxr = gx.data() + r * k;
            for (std::size_t i = 0; i < k; ++i) gxr[i] = p[i] * (g[i] - dot);
        }
        return gx;
    }

    std::size_t flops_per_sample() const override { return 3 * shape_product(output_shape_); }
    ojson header() const override { return ojson{{"kind", "softmax"}}; }
};

}  // namespace

// ------------------------------------------------------------- factories

std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::conv2d_transpose: return "conv2d_transpose";
        case LayerKind::relu: return "relu";
        case LayerKind::leaky_relu: return "leaky_relu";
        case LayerKind::sigmoid: return "sigmoid";
        case LayerKind::maxpool2d: return "maxpool2d";
        case LayerKind::flatten: return "flatten";
        case LayerKind::reshape: return "reshape";
        case LayerKind::softmax: return "softmax";
    }
    throw Error("unknown layer kind");
}

LayerKind layer_kind_from_name(const std::string& name) {
    static const std::map<std::string, LayerKind> lut = {
        {"dense", LayerKind::dense},
        {"conv2d", LayerKind::conv2d},
        {"conv2d_transpose", LayerKind::conv2d_transpose},
        {"relu", LayerKind::relu},
        {"leaky_relu", LayerKind::leaky_relu},
        {"sigmoid", LayerKind::sigmoid},
        {"maxpool2d", LayerKind::maxpool2d},
        {"flatten", LayerKind::flatten},
        {"reshape", LayerKind::reshape},
        {"softmax", LayerKind::softmax},
    };
    auto it = lut.find(name);
    if (it == lut.end()) throw ValidationError("unknown layer kind: " + name);
    return it->second;
}

std::unique_ptr<Layer> make_dense(std::size_t units) { return std::make_unique<DenseLayer>(units); }
std::unique_ptr<Layer> make_conv2d(std::size_t oc, std::size_t k, std::size_t s, std::size_t p) {
    return std::make_unique<Conv2dLayer>(oc, k, s, p);
}
std::unique_ptr<Layer> make_conv2d_transpose(std::size_t oc, std::size_t k, std::size_t s, std::size_t p) {
    return std::make_unique<ConvTranspose2dLayer>(oc, k, s, p);
}
std::unique_ptr<Layer> make_relu() { return std::make_unique<ReluLayer>(); }
std::unique_ptr<Layer> make_leaky_relu(double slope) { return std::make_unique<LeakyReluLayer>(slope); }
std::unique_ptr<Layer> make_sigmoid() { return std::make_unique<SigmoidLayer>(); }
std::unique_ptr<Layer> make_maxpool2d(std::size_t window, std::size_t stride) {
    return std::make_unique<MaxPool2dLayer>(window, stride);
}
std::unique_ptr<Layer> make_flatten() { return std::make_unique<FlattenLayer>(); }
std::unique_ptr<Layer> make_reshape(std::vector<std::size_t> target) {
    return std::make_unique<ReshapeLayer>(std::move(target));
}
std::unique_ptr<Layer> make_softmax() { return std::make_unique<SoftmaxLayer>(); }

std::unique_ptr<Layer> layer_from_header(const nlohmann::ordered_json& j) {
    LayerKind kind = layer_kind_from_name(j.at("kind").get<std::string>());
    switch (kind) {
        case LayerKind::dense:
            return make_dense(j.at("units").get<std::size_t>());
        case LayerKind::conv2d:
            return make_conv2d(j.at("out_channels").get<std::size_t>(), j.at("kernel").get<std::size_t>(),
                               j.at("stride").get<std::size_t>(), j.at("padding").get<std::size_t>());
        case LayerKind::conv2d_transpose:
            return make_conv2d_transpose(j.at("out_channels").get<std::size_t>(),
                                         j.at("kernel").get<std::size_t>(), j.at("stride").get<std::size_t>(),
                                         j.at("padding").get<std::size_t>());
        case LayerKind::relu:
            return make_relu();
        case LayerKind::leaky_relu:
            return make_leaky_relu(j.at("slope").get<double>());
        case LayerKind::sigmoid:
            return make_sigmoid();
        case LayerKind::maxpool2d:
            return make_maxpool2d(j.at("window").get<std::size_t>(), j.at("stride").get<std::size_t>());
        case LayerKind::flatten:
            return make_flatten();
        case LayerKind::reshape:
            return make_reshape(j.at("target").get<std::vector<std::size_t>>());
        case LayerKind::softmax:
            return make_softmax();
    }
    throw Error("unreachable");
}

// ------------------------------------------------------------- gradients

Tensor& Gradients::slot(const std::string& key, const std::vector<std::size_t>& shape) {
    auto it = grads_.find(key);
    if (it == grads_.end()) it = grads_.emplace(key, Tensor(shape)).first;
    return it->second;
}

const Tensor* Gradients::find(const std::string& key) const {
    auto it = grads_.find(key);
    return it == grads_.end() ? nullptr : &it->second;
}

// ------------------------------------------------------------ TappedModel

std::vector<std::size_t> default_tap_points(const std::vector<std::unique_ptr<Layer>>& layers) {
    // block = run of layers where activations/reshapes attach to the
    // preceding dense/conv/pool layer; softmax blocks are the output
    std::vector<std::size_t> taps;
    std::size_t block_start = 0;
    bool open = false;
    auto starts_block = [](LayerKind k) {
        return k == LayerKind::dense || k == LayerKind::conv2d || k == LayerKind::conv2d_transpose ||
               k == LayerKind::maxpool2d || k == LayerKind::softmax;
    };
    auto close_block = [&](std::size_t end_index) {
        if (!open) return;
        if (layers[block_start]->kind() != LayerKind::softmax) taps.push_back(end_index);
        open = false;
    };
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!open) {
            block_start = i;
            open = true;
        } else if (starts_block(layers[i]->kind())) {
            close_block(i - 1);
            block_start = i;
            open = true;
        }
    }
    close_block(layers.empty() ? 0 : layers.size() - 1);
    return taps;
}

TappedModel::TappedModel(std::vector<std::size_t> input_shape, std::vector<std::unique_ptr<Layer>> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
    bind_all();
    tap_points_ = default_tap_points(layers_);
    validate_taps();
}

TappedModel::TappedModel(std::vector<std::size_t> input_shape, std::vector<std::unique_ptr<Layer>> layers,
                         std::vector<std::size_t> tap_points)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)), tap_points_(std::move(tap_points)) {
    bind_all();
    validate_taps();
}

TappedModel::TappedModel(const TappedModel& other)
    : input_shape_(other.input_shape_), tap_points_(other.tap_points_), seed_(other.seed_) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

TappedModel& TappedModel::operator=(const TappedModel& other) {
    if (this == &other) return *this;
    TappedModel tmp(other);
    *this = std::move(tmp);
    return *this;
}

void TappedModel::bind_all() {
    if (layers_.empty()) throw ValidationError("model must have at least one layer");
    std::vector<std::size_t> shape = input_shape_;
    for (auto& layer : layers_) {
        layer->bind(shape);
        shape = layer->output_shape();
    }
}

void TappedModel::validate_taps() const {
    std::size_t prev = 0;
    bool first = true;
    for (std::size_t t : tap_points_) {
        if (t >= layers_.size()) throw ValidationError("tap point " + std::to_string(t) + " out of range");
        if (!first && t <= prev) throw ValidationError("tap points must be strictly increasing");
        prev = t;
        first = false;
    }
}

void TappedModel::set_tap_points(std::vector<std::size_t> taps) {
    tap_points_ = std::move(taps);
    validate_taps();
}

const std::vector<std::size_t>& TappedModel::output_shape() const { return layers_.back()->output_shape(); }

std::string TappedModel::tap_label(std::size_t t) const {
    std::size_t layer_index = tap_points_.at(t);
    std::size_t begin = t == 0 ? 0 : tap_points_[t - 1] + 1;
    std::string label;
    for (std::size_t i = begin; i <= layer_index; ++i) {
        if (!label.empty()) label += "+";
        label += layers_[i]->name();
    }
    return label;
}

ForwardResult TappedModel::forward(const Tensor& batch) const {
    if (batch_item_shape(batch) != input_shape_) {
        throw ValidationError("model input: expected " + shape_to_string(input_shape_) + " per sample, got " +
                              shape_to_string(batch_item_shape(batch)));
    }
    ForwardResult result;
    Tensor current = batch;
    std::size_t next_tap = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (batch_item_shape(current) != layers_[i]->input_shape()) {
            throw ValidationError(mismatch_msg(layers_[i]->name(), i, layers_[i]->input_shape(),
                                               batch_item_shape(current)));
        }
        current = layers_[i]->forward(current);
        if (next_tap < tap_points_.size() && tap_points_[next_tap] == i) {
            result.taps.emplace(i, current);
            ++next_tap;
        }
    }
    result.final = std::move(current);
    return result;
}

Tensor TappedModel::forward_final(const Tensor& batch) const {
    if (batch_item_shape(batch) != input_shape_) {
        throw ValidationError("model input: expected " + shape_to_string(input_shape_) + " per sample, got " +
                              shape_to_string(batch_item_shape(batch)));
    }
    Tensor current = batch;
    for (std::size_t i = 0; i < layers_.size(); ++i) current = layers_[i]->forward(current);
    return current;
}

std::vector<int> TappedModel::predict(const Tensor& batch) const {
    Tensor out = forward_final(batch);
    std::size_t n = out.dim(0);
    std::size_t k = out.size() / n;
    std::vector<int> labels(n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = out.data() + r * k;
        std::size_t best = 0;
        for (std::size_t i = 1; i < k; ++i) {
            if (row[i] > row[best]) best = i;
        }
        labels[r] = static_cast<int>(best);
    }
    return labels;
}

ForwardTrace TappedModel::forward_trace(const Tensor& batch) const {
    ForwardTrace trace;
    trace.input = batch;
    trace.outputs.reserve(layers_.size());
    Tensor current = batch;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (batch_item_shape(current) != layers_[i]->input_shape()) {
            throw ValidationError(mismatch_msg(layers_[i]->name(), i, layers_[i]->input_shape(),
                                               batch_item_shape(current)));
        }
        current = layers_[i]->forward(current);
        trace.outputs.push_back(current);
    }
    return trace;
}

Tensor TappedModel::backward(const ForwardTrace& trace, const Tensor& grad_final, Gradients& grads) const {
    Tensor g = grad_final;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        const Tensor& input = i == 0 ? trace.input : trace.outputs[i - 1];
        g = layers_[i]->backward(input, trace.outputs[i], g, "L" + std::to_string(i), &grads);
    }
    return g;
}

std::vector<ParamRef> TappedModel::params() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        auto refs = layers_[i]->params("L" + std::to_string(i));
        out.insert(out.end(), refs.begin(), refs.end());
    }
    return out;
}

void TappedModel::init_params(std::uint64_t seed) {
    seed_ = seed;
    Rng rng(seed);
    for (auto& layer : layers_) layer->init_params(rng);
}

std::size_t TappedModel::param_count() const {
    std::size_t total = 0;
    for (const auto& layer : layers_) total += layer->param_count();
    return total;
}

std::size_t TappedModel::flops_per_sample() const {
    std::size_t total = 0;
    for (const auto& layer : layers_) total += layer->flops_per_sample();
    return total;
}

nlohmann::ordered_json TappedModel::architecture_header() const {
    nlohmann::ordered_json j;
    j["version"] = "tracer-model/1";
    j["input_shape"] = input_shape_;
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (const auto& layer : layers_) layers.push_back(layer->header());
    j["layers"] = std::move(layers);
    j["tap_points"] = tap_points_;
    j["seed"] = seed_;
    return j;
}

}  // namespace tracer
