// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 TailForge Contributors
#pragma once

// The three-part network: feature extractor -> r, projection head -> z
// (unit rows, consumed only by the supervised-contrastive loss), and a single
// affine classifier head -> logits. Parts can be frozen independently; a
// frozen part's tensors are bit-identical across any number of optimizer
// steps.

#include <array>
#include <fstream>
#include <map>
#include <optional>

#include <json.hpp>

#include "tailforge/autodiff.hpp"

namespace tailforge {

enum class ExtractorKind { mlp, tiny_cnn };

enum class Part { extractor = 0, projection = 1, head = 2 };

inline const char* part_name(Part p) {
    switch (p) {
        case Part::extractor: return "extractor";
        case Part::projection: return "projection";
        default: return "head";
    }
}

struct NetworkSpec {
    ExtractorKind extractor = ExtractorKind::mlp;

    // mlp: full width chain including the input width; the last entry must
    // equal feature_dim.
    std::vector<std::size_t> mlp_widths;

    // tiny_cnn: conv stack over [in_channels, height, width] images followed
    // by global average pooling and one affine layer up to feature_dim.
    std::size_t in_channels = 0, height = 0, width = 0;
    std::vector<std::size_t> cnn_channels;
    std::size_t kernel = 3;

    std::size_t feature_dim = 0;
    std::vector<std::size_t> projection_widths; // exactly 3 affine layers
    std::size_t num_classes = 0;

    static NetworkSpec make_mlp(std::size_t input_dim, std::vector<std::size_t> hidden,
                                std::size_t feature_dim, std::size_t projection_dim,
                                std::size_t num_classes) {
        NetworkSpec s;
        s.extractor = ExtractorKind::mlp;
        s.mlp_widths.push_back(input_dim);
        for (std::size_t w : hidden) s.mlp_widths.push_back(w);
        s.mlp_widths.push_back(feature_dim);
        s.feature_dim = feature_dim;
        s.projection_widths = {feature_dim, feature_dim, projection_dim};
        s.num_classes = num_classes;
        s.validate();
        return s;
    }

    static NetworkSpec make_tiny_cnn(std::size_t in_channels, std::size_t height,
                                     std::size_t width, std::vector<std::size_t> channels,
                                     std::size_t kernel, std::size_t feature_dim,
                                     std::size_t projection_dim, std::size_t num_classes) {
        NetworkSpec s;
        s.extractor = ExtractorKind::tiny_cnn;
        s.in_channels = in_channels;
        s.height = height;
        s.width = width;
        s.cnn_channels = std::move(channels);
        s.kernel = kernel;
        s.feature_dim = feature_dim;
        s.projection_widths = {feature_dim, feature_dim, projection_dim};
        s.num_classes = num_classes;
        s.validate();
        return s;
    }

    void validate() const {
        if (num_classes == 0) throw ConfigError("model.num_classes", "must be positive");
        if (feature_dim == 0) throw ConfigError("model.feature_dim", "must be positive");
        if (projection_widths.size() != 3)
            throw ConfigError("model.projection",
                              "projection head must have exactly 3 affine layers");
        for (std::size_t w : projection_widths)
            if (w == 0) throw ConfigError("model.projection", "zero-width layer");
        if (extractor == ExtractorKind::mlp) {
            if (mlp_widths.size() < 2)
                throw ConfigError("model.mlp", "need input and output widths");
            for (std::size_t w : mlp_widths)
                if (w == 0) throw ConfigError("model.mlp", "zero-width layer");
            if (mlp_widths.back() != feature_dim)
                throw ConfigError("model.mlp", "last width must equal feature_dim");
        } else {
            if (in_channels == 0 || height == 0 || width == 0)
                throw ConfigError("model.tiny_cnn", "input dimensions must be positive");
            if (cnn_channels.empty()) throw ConfigError("model.tiny_cnn", "no conv layers");
            for (std::size_t c : cnn_channels)
                if (c == 0) throw ConfigError("model.tiny_cnn", "zero-width layer");
            if (kernel == 0 || kernel % 2 == 0)
                throw ConfigError("model.tiny_cnn", "kernel must be odd and positive");
        }
    }

    std::size_t projection_dim() const { return projection_widths.back(); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["extractor"] = extractor == ExtractorKind::mlp ? "mlp" : "tiny_cnn";
        if (extractor == ExtractorKind::mlp) {
            j["mlp_widths"] = mlp_widths;
        } else {
            j["in_channels"] = in_channels;
            j["height"] = height;
            j["width"] = width;
            j["cnn_channels"] = cnn_channels;
            j["kernel"] = kernel;
        }
        j["feature_dim"] = feature_dim;
        j["projection_widths"] = projection_widths;
        j["num_classes"] = num_classes;
        return j;
    }

    static NetworkSpec from_json(const nlohmann::json& j) {
        NetworkSpec s;
        std::string kind = j.at("extractor").get<std::string>();
        if (kind == "mlp") {
            s.extractor = ExtractorKind::mlp;
            s.mlp_widths = j.at("mlp_widths").get<std::vector<std::size_t>>();
        } else if (kind == "tiny_cnn") {
            s.extractor = ExtractorKind::tiny_cnn;
            s.in_channels = j.at("in_channels").get<std::size_t>();
            s.height = j.at("height").get<std::size_t>();
            s.width = j.at("width").get<std::size_t>();
            s.cnn_channels = j.at("cnn_channels").get<std::vector<std::size_t>>();
            s.kernel = j.at("kernel").get<std::size_t>();
        } else {
            throw ConfigError("model.extractor", "unknown kind '" + kind + "'");
        }
        s.feature_dim = j.at("feature_dim").get<std::size_t>();
        s.projection_widths = j.at("projection_widths").get<std::vector<std::size_t>>();
        s.num_classes = j.at("num_classes").get<std::size_t>();
        s.validate();
        return s;
    }
};

struct ParamTensor {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

/// Parameter store grouped by network part, with per-part freeze flags.
struct NetworkParams {
    NetworkSpec spec;
    std::array<std::vector<ParamTensor>, 3> parts;
    std::array<bool, 3> frozen{false, false, false};

    std::vector<ParamTensor>& part(Part p) { return parts[static_cast<std::size_t>(p)]; }
    const std::vector<ParamTensor>& part(Part p) const {
        return parts[static_cast<std::size_t>(p)];
    }
    bool is_frozen(Part p) const { return frozen[static_cast<std::size_t>(p)]; }
    void set_frozen(Part p, bool f) { frozen[static_cast<std::size_t>(p)] = f; }

    std::size_t num_parameters() const {
        std::size_t n = 0;
        for (const auto& ps : parts)
            for (const auto& t : ps) n += t.values.size();
        return n;
    }

    template <typename Fn>
    void for_each(Fn&& fn) {
        for (auto p : {Part::extractor, Part::projection, Part::head})
            for (auto& t : part(p)) fn(p, t);
    }
    template <typename Fn>
    void for_each(Fn&& fn) const {
        for (auto p : {Part::extractor, Part::projection, Part::head})
            for (const auto& t : part(p)) fn(p, t);
    }
};

namespace detail {

inline ParamTensor kaiming_affine_weight(const std::string& name, std::size_t fan_in,
                                         std::size_t fan_out, Rng& rng) {
    // Kaiming uniform with ReLU gain: U(-b, b), b = sqrt(6 / fan_in).
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    ParamTensor t{name, {fan_in, fan_out}, std::vector<double>(fan_in * fan_out)};
    for (auto& v : t.values) v = rng.uniform(-bound, bound);
    return t;
}

inline ParamTensor kaiming_conv_weight(const std::string& name, std::size_t out_ch,
                                       std::size_t in_ch, std::size_t k, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(in_ch * k * k));
    ParamTensor t{name, {out_ch, in_ch, k, k}, std::vector<double>(out_ch * in_ch * k * k)};
    for (auto& v : t.values) v = rng.uniform(-bound, bound);
    return t;
}

inline ParamTensor zero_bias(const std::string& name, std::size_t n) {
    return ParamTensor{name, {n}, std::vector<double>(n, 0.0)};
}

} // namespace detail

/// Kaiming-uniform weights (fan-in scaling), zero biases; deterministic in
/// the seed.
inline NetworkParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    NetworkParams p;
    p.spec = spec;
    Rng rng(seed);

    auto& ext = p.part(Part::extractor);
    if (spec.extractor == ExtractorKind::mlp) {
        for (std::size_t l = 0; l + 1 < spec.mlp_widths.size(); ++l) {
            std::string base = "extractor.l" + std::to_string(l);
            ext.push_back(detail::kaiming_affine_weight(base + ".weight", spec.mlp_widths[l],
                                                        spec.mlp_widths[l + 1], rng));
            ext.push_back(detail::zero_bias(base + ".bias", spec.mlp_widths[l + 1]));
        }
    } else {
        std::size_t in_ch = spec.in_channels;
        for (std::size_t l = 0; l < spec.cnn_channels.size(); ++l) {
            std::string base = "extractor.conv" + std::to_string(l);
            ext.push_back(detail::kaiming_conv_weight(base + ".weight", spec.cnn_channels[l],
                                                      in_ch, spec.kernel, rng));
            ext.push_back(detail::zero_bias(base + ".bias", spec.cnn_channels[l]));
            in_ch = spec.cnn_channels[l];
        }
        ext.push_back(detail::kaiming_affine_weight("extractor.fc.weight", in_ch,
                                                    spec.feature_dim, rng));
        ext.push_back(detail::zero_bias("extractor.fc.bias", spec.feature_dim));
    }

    auto& proj = p.part(Part::projection);
    std::size_t in = spec.feature_dim;
    for (std::size_t l = 0; l < spec.projection_widths.size(); ++l) {
        std::string base = "projection.l" + std::to_string(l);
        proj.push_back(detail::kaiming_affine_weight(base + ".weight", in,
                                                     spec.projection_widths[l], rng));
        proj.push_back(detail::zero_bias(base + ".bias", spec.projection_widths[l]));
        in = spec.projection_widths[l];
    }

    auto& head = p.part(Part::head);
    head.push_back(detail::kaiming_affine_weight("head.weight", spec.feature_dim,
                                                 spec.num_classes, rng));
    head.push_back(detail::zero_bias("head.bias", spec.num_classes));
    return p;
}

/// Re-initializes only the classifier head, leaving other parts untouched.
inline void reinit_head(NetworkParams& params, std::uint64_t seed) {
    Rng rng(seed);
    auto& head = params.part(Part::head);
    head.clear();
    head.push_back(detail::kaiming_affine_weight("head.weight", params.spec.feature_dim,
                                                 params.spec.num_classes, rng));
    head.push_back(detail::zero_bias("head.bias", params.spec.num_classes));
}

/// Binds a parameter store onto a tape for one forward/backward pass. Frozen
/// parts are bound without gradient so no gradient can ever flow into them.
class BoundModel {
public:
    struct Slot {
        Part part;
        std::size_t index; // within the part
        ad::Var var;
    };

    BoundModel(ad::Tape& tape, const NetworkParams& params) : tape_(tape), params_(params) {
        params.for_each([&](Part part, const ParamTensor& t) {
            bool grad = !params.is_frozen(part);
            ad::Var v = tape.input(t.shape, t.values, grad);
            slots_.push_back({part, index_within_[static_cast<std::size_t>(part)]++, v});
        });
    }

    const NetworkSpec& spec() const { return params_.spec; }

    /// Batch of vectors [B,D] or images [B,C,H,W] -> features r [B,feature_dim].
    ad::Var features(const TensorValue& batch) {
        const NetworkSpec& s = params_.spec;
        if (s.extractor == ExtractorKind::mlp) {
            if (batch.shape.size() != 2 || batch.shape[1] != s.mlp_widths.front())
                throw ShapeError("forward_features: batch " + shape_str(batch.shape) +
                                 " does not match mlp input width " +
                                 std::to_string(s.mlp_widths.front()));
            ad::Var h = tape_.constant(batch.shape, batch.data);
            std::size_t layers = s.mlp_widths.size() - 1;
            for (std::size_t l = 0; l < layers; ++l)
                h = ad::relu(ad::affine(h, at(Part::extractor, 2 * l),
                                        at(Part::extractor, 2 * l + 1)));
            return h;
        }
        if (batch.shape.size() != 4 || batch.shape[1] != s.in_channels ||
            batch.shape[2] != s.height || batch.shape[3] != s.width)
            throw ShapeError("forward_features: batch " + shape_str(batch.shape) +
                             " does not match cnn input " +
                             shape_str({0, s.in_channels, s.height, s.width}));
        ad::Var h = tape_.constant(batch.shape, batch.data);
        std::size_t pad = s.kernel / 2;
        for (std::size_t l = 0; l < s.cnn_channels.size(); ++l) {
            ad::Var w = at(Part::extractor, 2 * l);
            ad::Var b = at(Part::extractor, 2 * l + 1);
            h = ad::relu(ad::conv2d(h, w, &b, pad));
        }
        h = ad::global_avg_pool(h);
        std::size_t fc = 2 * s.cnn_channels.size();
        return ad::relu(ad::affine(h, at(Part::extractor, fc), at(Part::extractor, fc + 1)));
    }

    /// r -> z, rows L2-normalized.
    ad::Var projection(const ad::Var& r) {
        ad::Var h = r;
        for (std::size_t l = 0; l < 3; ++l) {
            h = ad::affine(h, at(Part::projection, 2 * l), at(Part::projection, 2 * l + 1));
            if (l + 1 < 3) h = ad::relu(h);
        }
        return ad::l2_normalize_rows(h);
    }

    /// r -> logits [B,K].
    ad::Var logits(const ad::Var& r) {
        return ad::affine(r, at(Part::head, 0), at(Part::head, 1));
    }

    const std::vector<Slot>& slots() const { return slots_; }

private:
    ad::Var at(Part part, std::size_t index) {
        for (const auto& s : slots_)
            if (s.part == part && s.index == index) return s.var;
        throw Error("BoundModel: missing parameter slot");
    }

    ad::Tape& tape_;
    const NetworkParams& params_;
    std::vector<Slot> slots_;
    std::array<std::size_t, 3> index_within_{0, 0, 0};
};

// Gradient-free forward passes for evaluation.

inline TensorValue forward_features(const NetworkParams& params, const TensorValue& batch) {
    ad::Tape tape;
    BoundModel m(tape, params);
    ad::Var r = m.features(batch);
    return TensorValue(r.shape(), r.values());
}

inline TensorValue forward_projection(const NetworkParams& params, const TensorValue& batch) {
    ad::Tape tape;
    BoundModel m(tape, params);
    ad::Var z = m.projection(m.features(batch));
    return TensorValue(z.shape(), z.values());
}

inline TensorValue forward_logits(const NetworkParams& params, const TensorValue& batch) {
    ad::Tape tape;
    BoundModel m(tape, params);
    ad::Var l = m.logits(m.features(batch));
    return TensorValue(l.shape(), l.values());
}

// ---------------------------------------------------------------------------
// Checkpoint file: magic "TFCK", version u32 LE, spec as length-prefixed
// canonical JSON, then every parameter tensor in canonical part order as
// (name length u32, name bytes, rank u32, dims u32 each, values f64 LE).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const NetworkParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    os.write("TFCK", 4);
    io::write_u32(os, kCheckpointVersion);
    std::string spec_json = params.spec.to_json().dump();
    io::write_u32(os, static_cast<std::uint32_t>(spec_json.size()));
    os.write(spec_json.data(), static_cast<std::streamsize>(spec_json.size()));
    params.for_each([&](Part, const ParamTensor& t) {
        io::write_u32(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        io::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) io::write_u32(os, static_cast<std::uint32_t>(d));
        for (double v : t.values) io::write_f64(os, v);
    });
    if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline NetworkParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::string(magic, 4) != "TFCK")
        throw IoError("bad magic in checkpoint: " + path);
    std::uint32_t version = io::read_u32(is, "version");
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    std::uint32_t spec_len = io::read_u32(is, "spec length");
    std::string spec_json(spec_len, '\0');
    is.read(spec_json.data(), spec_len);
    if (is.gcount() != static_cast<std::streamsize>(spec_len))
        throw IoError("truncated checkpoint spec");
    NetworkSpec spec;
    try {
        spec = NetworkSpec::from_json(nlohmann::json::parse(spec_json));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("corrupt checkpoint spec: ") + e.what());
    }

    // The parameter list and its order are a pure function of the spec.
    NetworkParams expected = init_params(spec, 0);
    NetworkParams out;
    out.spec = spec;
    expected.for_each([&](Part part, const ParamTensor& ref) {
        std::uint32_t name_len = io::read_u32(is, "tensor name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (is.gcount() != static_cast<std::streamsize>(name_len))
            throw IoError("truncated checkpoint tensor name");
        if (name != ref.name)
            throw IoError("checkpoint tensor order mismatch: expected '" + ref.name +
                          "', found '" + name + "'");
        std::uint32_t rank = io::read_u32(is, "tensor rank");
        Shape shape(rank);
        for (auto& d : shape) d = io::read_u32(is, "tensor dim");
        if (shape != ref.shape)
            throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) +
                          ", expected " + shape_str(ref.shape));
        ParamTensor t{name, shape, std::vector<double>(numel(shape))};
        for (auto& v : t.values) v = io::read_f64(is, "tensor values");
        out.part(part).push_back(std::move(t));
    });
    return out;
}

} // namespace tailforge
