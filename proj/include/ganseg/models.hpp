#pragma once

#include "ganseg/nn.hpp"

#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>

namespace ganseg {

enum class LayerKind { Conv, ConvTranspose, BatchNorm, LeakyRelu, Relu, Sigmoid, ConcatSkip };
enum class ModelKind { Generator, D1, D2, D3, D4 };
enum class Conditioning { Conditional, Unconditional };

inline const char* to_string(ModelKind k) {
    switch (k) {
        case ModelKind::Generator: return "G";
        case ModelKind::D1: return "D1";
        case ModelKind::D2: return "D2";
        case ModelKind::D3: return "D3";
        case ModelKind::D4: return "D4";
    }
    return "?";
}

inline ModelKind discriminator_kind_from_string(const std::string& s) {
    if (s == "D1") return ModelKind::D1;
    if (s == "D2") return ModelKind::D2;
    if (s == "D3") return ModelKind::D3;
    if (s == "D4") return ModelKind::D4;
    throw std::invalid_argument("unknown discriminator kind: " + s);
}

struct LayerSpec {
    LayerKind kind;
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    int output_padding = 0;
    int out_channels = 0;
    float slope = 0.2f;
    int skip_source = -1;  // layer index whose output feeds a ConcatSkip
};

struct ModelMeta {
    ModelKind kind = ModelKind::Generator;
    Conditioning conditioning = Conditioning::Conditional;
    int input_size = 0;  // contract spatial size (square); forward accepts any
                         // H,W divisible by 2^depth
    int in_channels = 1;
    int base_channels = 32;
    int depth = 0;
    bool paper_literal = false;
};

template <typename S>
struct Layer {
    LayerSpec spec;
    Tensor<S> weight;  // conv-type layers
    Tensor<S> bias;
    BatchNormState<S> bn;  // batchnorm layers
};

/// Receptive-field recurrence over the conv layers of a stack:
/// RF_0 = 1, J_0 = 1; RF_l = RF_{l-1} + (k-1)*J_{l-1}; J_l = J_{l-1}*s.
/// Non-conv layers are transparent. An empty list yields 1.
inline int receptive_field(const std::vector<LayerSpec>& layers) {
    long long rf = 1, jump = 1;
    for (const auto& l : layers) {
        if (l.kind != LayerKind::Conv) continue;
        rf += static_cast<long long>(l.kernel - 1) * jump;
        jump *= l.stride;
    }
    return static_cast<int>(rf);
}

/// Ordered layer list plus parameters for one network. Built once; layer
/// storage is stable afterwards so optimizer handles stay valid.
template <typename S>
struct ModelGraph {
    ModelMeta meta;
    std::vector<Layer<S>> layers;

    std::vector<LayerSpec> layer_specs() const {
        std::vector<LayerSpec> out;
        out.reserve(layers.size());
        for (const auto& l : layers) out.push_back(l.spec);
        return out;
    }

    int receptive_field() const { return ganseg::receptive_field(layer_specs()); }

    /// Trainable parameters in deterministic order (conv weights/biases,
    /// batchnorm gamma/beta). Running statistics are excluded.
    std::vector<Tensor<S>> trainable_params() {
        std::vector<Tensor<S>> out;
        for (auto& l : layers) {
            if (l.spec.kind == LayerKind::Conv || l.spec.kind == LayerKind::ConvTranspose) {
                out.push_back(l.weight);
                out.push_back(l.bias);
            } else if (l.spec.kind == LayerKind::BatchNorm) {
                out.push_back(l.bn.gamma);
                out.push_back(l.bn.beta);
            }
        }
        return out;
    }

    /// Every state tensor (trainable + running stats), named for checkpoints.
    std::vector<std::pair<std::string, Tensor<S>>> named_tensors() {
        std::vector<std::pair<std::string, Tensor<S>>> out;
        char buf[64];
        for (std::size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            auto name = [&](const char* field) {
                std::snprintf(buf, sizeof(buf), "L%02zu.%s", i, field);
                return std::string(buf);
            };
            if (l.spec.kind == LayerKind::Conv || l.spec.kind == LayerKind::ConvTranspose) {
                out.emplace_back(name("w"), l.weight);
                out.emplace_back(name("b"), l.bias);
            } else if (l.spec.kind == LayerKind::BatchNorm) {
                out.emplace_back(name("gamma"), l.bn.gamma);
                out.emplace_back(name("beta"), l.bn.beta);
                out.emplace_back(name("running_mean"), l.bn.running_mean);
                out.emplace_back(name("running_var"), l.bn.running_var);
            }
        }
        return out;
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto& p : trainable_params()) n += p.size();
        return n;
    }
};

template <typename S>
struct ForwardOptions {
    Mode mode = Mode::Infer;
    Tape<S>* tape = nullptr;
    bool zero_skips = false;  // ablation: replace skip tensors with zeros
};

namespace detail {

inline Shape4 layer_output_shape(const LayerSpec& l, const Shape4& in, int skip_channels) {
    switch (l.kind) {
        case LayerKind::Conv:
            return {in.n, l.out_channels, conv_out_dim(in.h, l.kernel, l.stride, l.padding),
                    conv_out_dim(in.w, l.kernel, l.stride, l.padding)};
        case LayerKind::ConvTranspose:
            return {in.n, l.out_channels,
                    (in.h - 1) * l.stride - 2 * l.padding + l.kernel + l.output_padding,
                    (in.w - 1) * l.stride - 2 * l.padding + l.kernel + l.output_padding};
        case LayerKind::ConcatSkip:
            return {in.n, in.c + skip_channels, in.h, in.w};
        default:
            return in;
    }
}

template <typename S>
void push_conv(ModelGraph<S>& m, LayerKind kind, int in_ch, int out_ch, int kernel, int stride,
               int pad, int out_pad, Rng& rng) {
    Layer<S> l;
    l.spec.kind = kind;
    l.spec.kernel = kernel;
    l.spec.stride = stride;
    l.spec.padding = pad;
    l.spec.output_padding = out_pad;
    l.spec.out_channels = out_ch;
    const Shape4 wshape = (kind == LayerKind::Conv) ? Shape4{out_ch, in_ch, kernel, kernel}
                                                    : Shape4{in_ch, out_ch, kernel, kernel};
    l.weight = init_normal<S>(wshape, S(0), S(0.02), rng);
    l.bias = Tensor<S>({1, out_ch, 1, 1}, S(0));
    l.weight.ensure_grad();
    l.bias.ensure_grad();
    m.layers.push_back(std::move(l));
}

template <typename S>
void push_batchnorm(ModelGraph<S>& m, int channels) {
    Layer<S> l;
    l.spec.kind = LayerKind::BatchNorm;
    l.spec.out_channels = channels;
    l.bn = BatchNormState<S>(channels);
    l.bn.gamma.ensure_grad();
    l.bn.beta.ensure_grad();
    m.layers.push_back(std::move(l));
}

template <typename S>
void push_activation(ModelGraph<S>& m, LayerKind kind, float slope = 0.2f) {
    Layer<S> l;
    l.spec.kind = kind;
    l.spec.slope = slope;
    m.layers.push_back(std::move(l));
}

template <typename S>
void push_concat_skip(ModelGraph<S>& m, int source_layer) {
    Layer<S> l;
    l.spec.kind = LayerKind::ConcatSkip;
    l.spec.skip_source = source_layer;
    m.layers.push_back(std::move(l));
}

/// Walks the stack symbolically from the contract input shape; throws if any
/// layer produces an invalid shape. Returns every layer's output shape.
template <typename S>
std::vector<Shape4> validate_shapes(ModelGraph<S>& m, Shape4 input) {
    std::vector<Shape4> shapes;
    Shape4 cur = input;
    for (const auto& l : m.layers) {
        int skip_c = 0;
        if (l.spec.kind == LayerKind::ConcatSkip) {
            if (l.spec.skip_source < 0 ||
                l.spec.skip_source >= static_cast<int>(shapes.size())) {
                throw std::logic_error("skip source must reference an earlier layer");
            }
            skip_c = shapes[l.spec.skip_source].c;
        }
        cur = layer_output_shape(l.spec, cur, skip_c);
        if (cur.h < 1 || cur.w < 1 || cur.c < 1) {
            throw std::invalid_argument(std::string(to_string(m.meta.kind)) +
                                        ": layer produces empty output " + cur.str());
        }
        shapes.push_back(cur);
    }
    return shapes;
}

inline bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

inline int capped_channels(int base, int stage) {
    const long long c = static_cast<long long>(base) << stage;
    return static_cast<int>(std::min<long long>(c, 512));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// U-Net style generator: `depth` stride-2 conv stages with channel doubling
/// capped at 512, the deepest stage acting as the bottleneck, then `depth`
/// stride-2 transposed-conv stages each concatenating its mirror encoder
/// output. Final layer maps to one sigmoid channel at input resolution.
///
/// The architecture is fully convolutional: forward accepts any spatial size
/// divisible by 2^depth, input_size fixes the contract used for validation.
template <typename S>
ModelGraph<S> build_generator(int input_size, int base_channels, int depth, Rng& rng,
                              int in_channels = 1) {
    if (!detail::is_power_of_two(input_size) || input_size < 64) {
        throw std::invalid_argument("generator input_size must be a power of two >= 64, got " +
                                    std::to_string(input_size));
    }
    if (depth < 1 || (input_size >> depth) < 4) {
        throw std::invalid_argument("generator depth " + std::to_string(depth) +
                                    " too large for input size " + std::to_string(input_size));
    }
    if (base_channels < 1) throw std::invalid_argument("base_channels must be positive");

    ModelGraph<S> m;
    m.meta = {ModelKind::Generator, Conditioning::Conditional, input_size, in_channels,
              base_channels, depth, false};

    std::vector<int> enc_out_layer(depth);  // layer index of each encoder stage output
    std::vector<int> enc_channels(depth);
    int ch = in_channels;
    for (int i = 0; i < depth; ++i) {
        const int out_ch = detail::capped_channels(base_channels, i);
        detail::push_conv(m, LayerKind::Conv, ch, out_ch, 3, 2, 1, 0, rng);
        if (i > 0) detail::push_batchnorm(m, out_ch);
        detail::push_activation<S>(m, LayerKind::LeakyRelu, 0.2f);
        enc_out_layer[i] = static_cast<int>(m.layers.size()) - 1;
        enc_channels[i] = out_ch;
        ch = out_ch;
    }
    for (int t = 1; t < depth; ++t) {
        const int mirror = depth - 1 - t;  // encoder stage to concatenate
        const int out_ch = enc_channels[mirror];
        detail::push_conv(m, LayerKind::ConvTranspose, ch, out_ch, 3, 2, 1, 1, rng);
        detail::push_batchnorm(m, out_ch);
        detail::push_activation<S>(m, LayerKind::Relu);
        detail::push_concat_skip<S>(m, enc_out_layer[mirror]);
        ch = 2 * out_ch;
    }
    detail::push_conv(m, LayerKind::ConvTranspose, ch, 1, 3, 2, 1, 1, rng);
    detail::push_activation<S>(m, LayerKind::Sigmoid);

    detail::validate_shapes(m, {1, in_channels, input_size, input_size});
    return m;
}

/// Discriminators D1-D4. Patch sizes are normative; the conv geometry is
/// derived so the receptive-field recurrence lands exactly on them:
///   D1: three 1x1/s1 convs                          -> RF 1  (PixelGAN)
///   D2: (k4,s2)(k4,s1)(k4,s1)                       -> RF 16
///   D3: (k4,s2)(k4,s2)(k4,s2)(k4,s1)(k4,s1)         -> RF 70
///   D4: five (k3,s2) blocks + global-reducing head  -> RF >= input size
/// The last conv of each stack emits the 1-channel score map, followed by a
/// sigmoid. Conditional mode consumes image and mask concatenated on the
/// channel axis; unconditional consumes the mask alone.
///
/// paper_literal instead builds the stated layer count entirely from k3/s2
/// convs (the paper fixes kernel 3x3 and stride 2 for all discriminators);
/// the resulting stack cannot reproduce patch sizes 1 or 16, and the summary
/// reports its true receptive field.
template <typename S>
ModelGraph<S> build_discriminator(ModelKind kind, int input_size, Conditioning conditioning,
                                  int base_channels, Rng& rng, bool paper_literal = false) {
    if (kind == ModelKind::Generator) {
        throw std::invalid_argument("build_discriminator: kind must be D1..D4");
    }
    if (input_size < 1) throw std::invalid_argument("input_size must be positive");
    const int in_ch = (conditioning == Conditioning::Conditional) ? 2 : 1;
    const int c = base_channels;

    ModelGraph<S> m;
    m.meta = {kind, conditioning, input_size, in_ch, base_channels, 0, paper_literal};

    struct ConvDef {
        int out_ch, kernel, stride, pad;
        bool bn;
    };
    std::vector<ConvDef> defs;
    if (paper_literal) {
        static const std::map<ModelKind, int> stated = {
            {ModelKind::D1, 3}, {ModelKind::D2, 5}, {ModelKind::D3, 3}, {ModelKind::D4, 5}};
        const int n_layers = stated.at(kind);
        for (int i = 0; i < n_layers; ++i) {
            const bool last = (i == n_layers - 1);
            defs.push_back({last ? 1 : detail::capped_channels(c, i), 3, 2, 1, !last && i > 0});
        }
    } else {
        switch (kind) {
            case ModelKind::D1:
                defs = {{c, 1, 1, 0, false}, {2 * c, 1, 1, 0, true}, {1, 1, 1, 0, false}};
                break;
            case ModelKind::D2:
                defs = {{c, 4, 2, 1, false}, {2 * c, 4, 1, 1, true}, {1, 4, 1, 1, false}};
                break;
            case ModelKind::D3:
                defs = {{c, 4, 2, 1, false},
                        {2 * c, 4, 2, 1, true},
                        {4 * c, 4, 2, 1, true},
                        {8 * c, 4, 1, 1, true},
                        {1, 4, 1, 1, false}};
                break;
            case ModelKind::D4: {
                if (input_size < 32 || input_size % 32 != 0) {
                    throw std::invalid_argument(
                        "D4 needs an input size that is a positive multiple of 32 so its "
                        "receptive field covers the image; got " +
                        std::to_string(input_size));
                }
                defs = {{c, 3, 2, 1, false},
                        {2 * c, 3, 2, 1, true},
                        {4 * c, 3, 2, 1, true},
                        {8 * c, 3, 2, 1, true},
                        {8 * c, 3, 2, 1, true}};
                // global-reducing head: a valid conv spanning the remaining map
                defs.push_back({1, input_size / 32, 1, 0, false});
                break;
            }
            default: break;
        }
    }

    int ch = in_ch;
    for (std::size_t i = 0; i < defs.size(); ++i) {
        const auto& d = defs[i];
        const bool last = (i == defs.size() - 1);
        detail::push_conv(m, LayerKind::Conv, ch, d.out_ch, d.kernel, d.stride, d.pad, 0, rng);
        if (d.bn) detail::push_batchnorm(m, d.out_ch);
        detail::push_activation<S>(m, last ? LayerKind::Sigmoid : LayerKind::LeakyRelu, 0.2f);
        ch = d.out_ch;
    }

    detail::validate_shapes(m, {1, in_ch, input_size, input_size});
    return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> forward(ModelGraph<S>& m, const Tensor<S>& input, const ForwardOptions<S>& opt = {}) {
    if (input.shape().c != m.meta.in_channels) {
        throw std::invalid_argument(std::string(to_string(m.meta.kind)) + ": expected " +
                                    std::to_string(m.meta.in_channels) + " input channels, got " +
                                    input.shape().str());
    }
    std::set<int> skip_sources;
    for (const auto& l : m.layers) {
        if (l.spec.kind == LayerKind::ConcatSkip) skip_sources.insert(l.spec.skip_source);
    }

    Tape<S>* tape = opt.tape;
    std::map<int, Tensor<S>> cached;
    Tensor<S> x = input;
    for (int i = 0; i < static_cast<int>(m.layers.size()); ++i) {
        Layer<S>& l = m.layers[i];
        switch (l.spec.kind) {
            case LayerKind::Conv:
                x = conv2d(x, l.weight, l.bias, l.spec.stride, l.spec.padding, tape);
                break;
            case LayerKind::ConvTranspose:
                x = conv_transpose2d(x, l.weight, l.bias, l.spec.stride, l.spec.padding,
                                     l.spec.output_padding, tape);
                break;
            case LayerKind::BatchNorm:
                x = batchnorm(x, l.bn, opt.mode, tape);
                break;
            case LayerKind::LeakyRelu:
                x = leaky_relu(x, static_cast<S>(l.spec.slope), tape);
                break;
            case LayerKind::Relu:
                x = relu(x, tape);
                break;
            case LayerKind::Sigmoid:
                x = sigmoid(x, tape);
                break;
            case LayerKind::ConcatSkip: {
                auto it = cached.find(l.spec.skip_source);
                if (it == cached.end()) throw std::logic_error("missing skip tensor");
                Tensor<S> skip = it->second;
                if (opt.zero_skips) skip = Tensor<S>(skip.shape(), S(0));
                x = concat_channels(x, skip, tape);
                break;
            }
        }
        if (skip_sources.count(i)) cached.emplace(i, x);
    }
    return x;
}

/// Marks every trainable parameter as a leaf on the tape.
template <typename S>
void watch_params(ModelGraph<S>& m, Tape<S>& tape) {
    for (auto& l : m.layers) {
        if (l.spec.kind == LayerKind::Conv || l.spec.kind == LayerKind::ConvTranspose) {
            tape.watch(l.weight);
            tape.watch(l.bias);
        } else if (l.spec.kind == LayerKind::BatchNorm) {
            tape.watch(l.bn.gamma);
            tape.watch(l.bn.beta);
        }
    }
}

/// Builds the discriminator input for one sample: channel-concatenated
/// image+mask when conditional, the mask alone otherwise.
template <typename S>
Tensor<S> discriminator_input(const ModelGraph<S>& d, const Tensor<S>& image,
                              const Tensor<S>& mask, Tape<S>* tape = nullptr) {
    if (d.meta.conditioning == Conditioning::Conditional) {
        return concat_channels(image, mask, tape);
    }
    return mask;
}

/// Mean of a sigmoid score map over all patch positions and batch entries.
template <typename S>
S aggregate_scores(const Tensor<S>& score_map) {
    if (score_map.size() == 0) throw std::invalid_argument("aggregate_scores: empty score map");
    return mean(score_map).item();
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

/// Plain-text architecture table: layer, kernel/stride, output shape at the
/// contract input size, parameter count, cumulative receptive field.
template <typename S>
std::string summary(ModelGraph<S>& m) {
    const Shape4 in{1, m.meta.in_channels, m.meta.input_size, m.meta.input_size};
    auto shapes = detail::validate_shapes(m, in);

    std::ostringstream os;
    os << to_string(m.meta.kind) << " (input " << in.str() << ", conditioning "
       << (m.meta.conditioning == Conditioning::Conditional ? "conditional" : "unconditional")
       << (m.meta.paper_literal ? ", paper-literal" : "") << ")\n";
    os << std::left << std::setw(5) << "idx" << std::setw(16) << "layer" << std::setw(10)
       << "k/s/p" << std::setw(18) << "output" << std::setw(12) << "params" << "rf\n";

    long long rf = 1, jump = 1;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const auto& l = m.layers[i];
        std::string kind;
        std::int64_t params = 0;
        std::string ksp = "-";
        switch (l.spec.kind) {
            case LayerKind::Conv:
                kind = "conv";
                params = m.layers[i].weight.size() + m.layers[i].bias.size();
                rf += static_cast<long long>(l.spec.kernel - 1) * jump;
                jump *= l.spec.stride;
                break;
            case LayerKind::ConvTranspose:
                kind = "conv_transpose";
                params = m.layers[i].weight.size() + m.layers[i].bias.size();
                break;
            case LayerKind::BatchNorm:
                kind = "batchnorm";
                params = 2 * l.spec.out_channels;
                break;
            case LayerKind::LeakyRelu: kind = "leaky_relu"; break;
            case LayerKind::Relu: kind = "relu"; break;
            case LayerKind::Sigmoid: kind = "sigmoid"; break;
            case LayerKind::ConcatSkip:
                kind = "concat_skip<" + std::to_string(l.spec.skip_source) + ">";
                break;
        }
        if (l.spec.kind == LayerKind::Conv || l.spec.kind == LayerKind::ConvTranspose) {
            ksp = std::to_string(l.spec.kernel) + "/" + std::to_string(l.spec.stride) + "/" +
                  std::to_string(l.spec.padding);
        }
        os << std::left << std::setw(5) << i << std::setw(16) << kind << std::setw(10) << ksp
           << std::setw(18) << shapes[i].str() << std::setw(12) << params << rf << "\n";
    }
    os << "trainable parameters: " << m.param_count()
       << ", receptive field: " << m.receptive_field() << "\n";
    return os.str();
}

}  // namespace ganseg
