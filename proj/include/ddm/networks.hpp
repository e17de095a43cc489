#pragma once

// The two trainable networks: a time-conditioned encoder-decoder mapping
// (S, T, x_t, t) to a full-resolution latent code, and a VoxelMorph-style
// encoder-decoder mapping (S, code) to a 3-channel displacement field.

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddm/grid.hpp"
#include "ddm/nn/layers.hpp"

namespace ddm {

enum class ModelMode { Ddm, Direct };

inline std::string to_string(ModelMode m) { return m == ModelMode::Ddm ? "ddm" : "direct"; }
inline ModelMode parse_mode(const std::string& s) {
    if (s == "ddm") return ModelMode::Ddm;
    if (s == "direct") return ModelMode::Direct;
    throw std::invalid_argument("unknown model mode '" + s + "' (expected ddm or direct)");
}

struct NetworkConfig {
    Shape3 image_shape{32, 32, 8};
    std::vector<int> diffusion_channels{8, 16, 32, 32};
    std::vector<int> deform_encoder{16, 32, 32, 32};
    std::vector<int> deform_decoder{32, 32, 32};
    std::vector<int> deform_extra{8, 8};
    int time_embed_dim = 32;
    ModelMode mode = ModelMode::Ddm;

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = nlohmann::json{{"image_shape", {c.image_shape.d, c.image_shape.h, c.image_shape.w}},
                       {"diffusion_channels", c.diffusion_channels},
                       {"deform_encoder", c.deform_encoder},
                       {"deform_decoder", c.deform_decoder},
                       {"deform_extra", c.deform_extra},
                       {"time_embed_dim", c.time_embed_dim},
                       {"mode", to_string(c.mode)}};
}

inline void require_known_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                               const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        require(ok, section + ": unknown key '" + it.key() + "'");
    }
}

inline void from_json(const nlohmann::json& j, NetworkConfig& c) {
    require_known_keys(j,
                       {"image_shape", "diffusion_channels", "deform_encoder", "deform_decoder", "deform_extra",
                        "time_embed_dim", "mode"},
                       "network config");
    if (j.contains("image_shape")) {
        auto s = j.at("image_shape").get<std::vector<int>>();
        require(s.size() == 3, "image_shape must have three entries");
        c.image_shape = {s[0], s[1], s[2]};
    }
    if (j.contains("diffusion_channels")) c.diffusion_channels = j.at("diffusion_channels").get<std::vector<int>>();
    if (j.contains("deform_encoder")) c.deform_encoder = j.at("deform_encoder").get<std::vector<int>>();
    if (j.contains("deform_decoder")) c.deform_decoder = j.at("deform_decoder").get<std::vector<int>>();
    if (j.contains("deform_extra")) c.deform_extra = j.at("deform_extra").get<std::vector<int>>();
    if (j.contains("time_embed_dim")) c.time_embed_dim = j.at("time_embed_dim").get<int>();
    if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
}

namespace detail {

// An axis is halved while its current extent is at least 4; shorter axes keep
// stride 1 (shallower downsampling along short axes).
inline bool axis_downsamples(int n, int depth, std::vector<int>* strides) {
    for (int l = 0; l < depth; ++l) {
        int s = 1;
        if (n >= 4) {
            if (n % 2) return false;
            s = 2;
        }
        if (strides) strides->push_back(s);
        n /= s;
    }
    return true;
}

}  // namespace detail

/// Per-level strides for a network of the given depth. Rejects shapes that
/// cannot be halved cleanly and names the smallest padded shape that would.
inline std::vector<nn::Stride3> level_strides(const Shape3& shape, int depth) {
    require(shape.d >= 2 && shape.h >= 2 && shape.w >= 2, "image shape must be at least 2 along every axis");
    std::vector<int> per_axis[3];
    bool ok = true;
    Shape3 suggestion = shape;
    int* sug[3] = {&suggestion.d, &suggestion.h, &suggestion.w};
    for (int a = 0; a < 3; ++a) {
        if (!detail::axis_downsamples(shape[a], depth, &per_axis[a])) {
            ok = false;
            int n = shape[a];
            while (!detail::axis_downsamples(n, depth, nullptr)) ++n;
            *sug[a] = n;
        }
    }
    if (!ok)
        throw std::invalid_argument("image shape " + shape.str() + " is not divisible for downsampling depth " +
                                    std::to_string(depth) + "; zero-pad to " + suggestion.str());
    std::vector<nn::Stride3> out(depth);
    for (int l = 0; l < depth; ++l) out[l] = {per_axis[0][l], per_axis[1][l], per_axis[2][l]};
    return out;
}

struct UNetSpec {
    std::string name;
    int in_channels = 1;
    std::vector<int> encoder;  // encoder[0] at full resolution, then one per downsampling level
    std::vector<int> decoder;  // decoder[k] is produced at level depth-1-k (coarse to fine)
    std::vector<int> extra;    // full-resolution convolutions after the decoder
    int out_channels = 1;
    nn::Activation activation = nn::Activation::LeakyReLU;
    int time_dim = 0;          // 0 disables timestep conditioning
    double head_init_std = 0;  // > 0: normal(0, std) head weights with zero bias
};

/// Encoder-decoder with skip connections. Conditioning on a timestep adds a
/// learned per-channel projection of the timestep embedding at every stage.
class UNet3d {
public:
    struct Cache {
        Tensor input;
        std::vector<double> emb, temb_pre, temb;
        std::vector<Tensor> enc_pre, enc_out;
        std::vector<Tensor> dec_cat, dec_pre, dec_out;
        std::vector<Tensor> extra_pre, extra_out;
        Tensor head_in;
    };

    UNet3d() = default;
    UNet3d(UNetSpec spec, const Shape3& shape, nn::Rng& rng) : spec_(std::move(spec)), shape_(shape) {
        require(!spec_.encoder.empty(), spec_.name + ": at least one encoder stage required");
        const int depth = static_cast<int>(spec_.encoder.size()) - 1;
        require(static_cast<int>(spec_.decoder.size()) == depth,
                spec_.name + ": decoder needs one width per downsampling level");
        for (int w : spec_.encoder) require(w > 0, spec_.name + ": widths must be positive");
        for (int w : spec_.decoder) require(w > 0, spec_.name + ": widths must be positive");
        for (int w : spec_.extra) require(w > 0, spec_.name + ": widths must be positive");
        strides_ = level_strides(shape, depth);

        const auto& e = spec_.encoder;
        const std::string& n = spec_.name;
        enc_.emplace_back(n + ".enc0", spec_.in_channels, e[0]);
        for (int l = 1; l <= depth; ++l) enc_.emplace_back(n + ".enc" + std::to_string(l), e[l - 1], e[l], strides_[l - 1]);
        int prev = e[depth];
        for (int k = 0; k < depth; ++k) {
            const int level = depth - k;  // skip comes from encoder level-1
            dec_.emplace_back(n + ".dec" + std::to_string(k), prev + e[level - 1], spec_.decoder[k]);
            prev = spec_.decoder[k];
        }
        for (std::size_t m = 0; m < spec_.extra.size(); ++m) {
            extra_.emplace_back(n + ".extra" + std::to_string(m), prev, spec_.extra[m]);
            prev = spec_.extra[m];
        }
        head_ = nn::Conv3d(n + ".head", prev, spec_.out_channels);

        for (auto& c : enc_) c.init_default(rng);
        for (auto& c : dec_) c.init_default(rng);
        for (auto& c : extra_) c.init_default(rng);
        if (spec_.head_init_std > 0) {
            nn::init_normal(head_.weight(), spec_.head_init_std, rng);
        } else {
            head_.init_default(rng);
        }

        if (spec_.time_dim > 0) {
            temb_ = nn::Linear(n + ".temb", spec_.time_dim, spec_.time_dim);
            temb_.init_default(rng);
            for (std::size_t l = 0; l < enc_.size(); ++l) {
                proj_enc_.emplace_back(n + ".tproj_enc" + std::to_string(l), spec_.time_dim, e[l]);
                proj_enc_.back().init_default(rng);
            }
            for (std::size_t k = 0; k < dec_.size(); ++k) {
                proj_dec_.emplace_back(n + ".tproj_dec" + std::to_string(k), spec_.time_dim, spec_.decoder[k]);
                proj_dec_.back().init_default(rng);
            }
        }
    }

    const UNetSpec& spec() const { return spec_; }
    int depth() const { return static_cast<int>(strides_.size()); }
    const std::vector<nn::Stride3>& strides() const { return strides_; }

    Tensor forward(const Tensor& x, int t = 0) const { return run(x, t, nullptr); }
    Tensor forward(const Tensor& x, int t, Cache& cache) const { return run(x, t, &cache); }

    /// Accumulates parameter gradients for the pass recorded in cache and
    /// returns dL/d(input) when want_dx is set.
    Tensor backward(const Cache& c, const Tensor& d_out, bool want_dx) {
        const auto act = spec_.activation;
        const int depth = this->depth();
        const bool timed = spec_.time_dim > 0;
        std::vector<double> dtemb(timed ? spec_.time_dim : 0, 0.0);
        auto add_time_grad = [&](nn::Linear& proj, const Tensor& dpre) {
            if (!timed) return;
            auto d = proj.backward(c.temb, nn::channel_sums(dpre));
            for (int i = 0; i < spec_.time_dim; ++i) dtemb[i] += d[i];
        };

        Tensor dg = head_.backward(c.head_in, d_out, true);
        for (int m = static_cast<int>(extra_.size()) - 1; m >= 0; --m) {
            Tensor dpre = nn::apply_backward(act, c.extra_pre[m], dg);
            dg = extra_[m].backward(m == 0 ? dec_or_enc_top(c) : c.extra_out[m - 1], dpre, true);
        }

        std::vector<Tensor> dh(depth + 1);
        for (int l = 0; l <= depth; ++l) dh[l] = Tensor(c.enc_out[l].shape(), c.enc_out[l].channels(), 0.0);
        for (int k = depth - 1; k >= 0; --k) {
            const int level = depth - k;
            Tensor dpre = nn::apply_backward(act, c.dec_pre[k], dg);
            if (timed) add_time_grad(proj_dec_[k], dpre);
            Tensor dcat = dec_[k].backward(c.dec_cat[k], dpre, true);
            const int up_ch = dcat.channels() - c.enc_out[level - 1].channels();
            auto [dup, dskip] = nn::split_channels(dcat, up_ch);
            accumulate(dh[level - 1], dskip);
            dg = nn::upsample_backward(dup, strides_[level - 1]);
        }
        accumulate(dh[depth], dg);

        Tensor dx;
        for (int l = depth; l >= 0; --l) {
            Tensor dpre = nn::apply_backward(act, c.enc_pre[l], dh[l]);
            if (timed) add_time_grad(proj_enc_[l], dpre);
            if (l > 0) {
                accumulate(dh[l - 1], enc_[l].backward(c.enc_out[l - 1], dpre, true));
            } else {
                dx = enc_[0].backward(c.input, dpre, want_dx);
            }
        }
        if (timed) {
            auto dpre = nn::apply_backward(nn::Activation::SiLU, c.temb_pre, dtemb);
            temb_.backward(c.emb, dpre);
        }
        return dx;
    }

    std::vector<nn::Param*> params() { return collect<nn::Param>(*this); }
    std::vector<const nn::Param*> params() const { return collect<const nn::Param>(*this); }

private:
    template <class P, class Self>
    static std::vector<P*> collect(Self& self) {
        std::vector<P*> out;
        auto add = [&out](auto& layer) {
            for (auto* p : layer.params()) out.push_back(p);
        };
        if (self.spec_.time_dim > 0) add(self.temb_);
        for (auto& c : self.enc_) add(c);
        for (auto& c : self.dec_) add(c);
        for (auto& c : self.extra_) add(c);
        add(self.head_);
        for (auto& p : self.proj_enc_) add(p);
        for (auto& p : self.proj_dec_) add(p);
        return out;
    }

    static void accumulate(Tensor& dst, const Tensor& src) {
        for (std::size_t n = 0; n < dst.size(); ++n) dst[n] += src[n];
    }

    const Tensor& dec_or_enc_top(const Cache& c) const { return c.dec_out.empty() ? c.enc_out[0] : c.dec_out.back(); }

    Tensor run(const Tensor& x, int t, Cache* cache) const {
        require(x.shape() == shape_, spec_.name + ": input shape " + x.shape().str() + " does not match configured " +
                                         shape_.str());
        require(x.channels() == spec_.in_channels, spec_.name + ": expected " + std::to_string(spec_.in_channels) +
                                                       " input channels");
        Cache local;
        Cache& c = cache ? *cache : local;
        const auto act = spec_.activation;
        const int depth = this->depth();
        const bool timed = spec_.time_dim > 0;
        if (cache) c.input = x;
        if (timed) {
            c.emb = nn::timestep_embedding(t, spec_.time_dim);
            c.temb_pre = temb_.forward(c.emb);
            c.temb = nn::apply(nn::Activation::SiLU, c.temb_pre);
        }
        c.enc_pre.assign(depth + 1, Tensor());
        c.enc_out.assign(depth + 1, Tensor());
        for (int l = 0; l <= depth; ++l) {
            Tensor pre = enc_[l].forward(l == 0 ? x : c.enc_out[l - 1]);
            if (timed) nn::add_channel_bias(pre, proj_enc_[l].forward(c.temb));
            c.enc_out[l] = nn::apply(act, pre);
            c.enc_pre[l] = std::move(pre);
        }
        c.dec_cat.assign(depth, Tensor());
        c.dec_pre.assign(depth, Tensor());
        c.dec_out.assign(depth, Tensor());
        const Tensor* g = &c.enc_out[depth];
        for (int k = 0; k < depth; ++k) {
            const int level = depth - k;
            c.dec_cat[k] = nn::concat(nn::upsample(*g, strides_[level - 1]), c.enc_out[level - 1]);
            Tensor pre = dec_[k].forward(c.dec_cat[k]);
            if (timed) nn::add_channel_bias(pre, proj_dec_[k].forward(c.temb));
            c.dec_out[k] = nn::apply(act, pre);
            c.dec_pre[k] = std::move(pre);
            g = &c.dec_out[k];
        }
        c.extra_pre.assign(extra_.size(), Tensor());
        c.extra_out.assign(extra_.size(), Tensor());
        for (std::size_t m = 0; m < extra_.size(); ++m) {
            Tensor pre = extra_[m].forward(*g);
            c.extra_out[m] = nn::apply(act, pre);
            c.extra_pre[m] = std::move(pre);
            g = &c.extra_out[m];
        }
        if (cache) c.head_in = *g;
        return head_.forward(*g);
    }

    UNetSpec spec_;
    Shape3 shape_{};
    std::vector<nn::Stride3> strides_;
    nn::Linear temb_;
    std::vector<nn::Conv3d> enc_, dec_, extra_;
    nn::Conv3d head_;
    std::vector<nn::Linear> proj_enc_, proj_dec_;
};

inline constexpr double kFlowHeadInitStd = 1e-5;

inline UNetSpec diffusion_spec(const NetworkConfig& cfg) {
    UNetSpec s;
    s.name = "diffusion";
    s.in_channels = 3;
    s.encoder = cfg.diffusion_channels;
    for (int l = static_cast<int>(cfg.diffusion_channels.size()) - 2; l >= 0; --l)
        s.decoder.push_back(cfg.diffusion_channels[l]);
    s.out_channels = 1;
    s.activation = nn::Activation::SiLU;
    s.time_dim = cfg.time_embed_dim;
    return s;
}

inline UNetSpec deformation_spec(const NetworkConfig& cfg) {
    UNetSpec s;
    s.name = "deformation";
    s.in_channels = 2;
    s.encoder = cfg.deform_encoder;
    s.decoder = cfg.deform_decoder;
    s.extra = cfg.deform_extra;
    s.out_channels = 3;
    s.activation = nn::Activation::LeakyReLU;
    s.head_init_std = kFlowHeadInitStd;
    return s;
}

inline void validate(const NetworkConfig& cfg) {
    require(!cfg.diffusion_channels.empty(), "diffusion_channels needs at least one stage");
    require(!cfg.deform_encoder.empty(), "deform_encoder needs at least one stage");
    require(cfg.deform_decoder.size() + 1 == cfg.deform_encoder.size(),
            "deform_decoder must have one entry fewer than deform_encoder");
    require(cfg.time_embed_dim >= 2 && cfg.time_embed_dim % 2 == 0, "time_embed_dim must be a positive even integer");
    level_strides(cfg.image_shape, static_cast<int>(cfg.diffusion_channels.size()) - 1);
    level_strides(cfg.image_shape, static_cast<int>(cfg.deform_encoder.size()) - 1);
}

/// Both networks plus the configuration that shaped them. In direct mode the
/// deformation network consumes (S, T) and the diffusion network is absent.
class ModelWeights {
public:
    ModelWeights() = default;

    const NetworkConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    bool has_diffusion() const { return diffusion_.has_value(); }
    UNet3d& diffusion() { return *diffusion_; }
    const UNet3d& diffusion() const { return *diffusion_; }
    UNet3d& deformation() { return deformation_; }
    const UNet3d& deformation() const { return deformation_; }

    std::vector<nn::Param*> params() { return collect<nn::Param>(*this); }
    std::vector<const nn::Param*> params() const { return collect<const nn::Param>(*this); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto* p : params()) n += p->size();
        return n;
    }

    void zero_grad() {
        for (auto* p : params()) p->zero_grad();
    }

    friend ModelWeights build_networks(const NetworkConfig& cfg, std::uint64_t seed);

private:
    template <class P, class Self>
    static std::vector<P*> collect(Self& self) {
        std::vector<P*> out;
        if (self.diffusion_)
            for (auto* p : self.diffusion_->params()) out.push_back(p);
        for (auto* p : self.deformation_.params()) out.push_back(p);
        return out;
    }

    NetworkConfig config_;
    std::uint64_t seed_ = 0;
    std::optional<UNet3d> diffusion_;
    UNet3d deformation_;
};

inline ModelWeights build_networks(const NetworkConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    nn::Rng rng(seed);
    ModelWeights w;
    w.config_ = cfg;
    w.seed_ = seed;
    if (cfg.mode == ModelMode::Ddm) w.diffusion_.emplace(diffusion_spec(cfg), cfg.image_shape, rng);
    w.deformation_ = UNet3d(deformation_spec(cfg), cfg.image_shape, rng);
    return w;
}

inline Tensor stack_channels(std::initializer_list<const Volume*> vols) {
    const Shape3 s = (*vols.begin())->shape();
    std::vector<double> v;
    v.reserve(s.voxels() * vols.size());
    for (const Volume* x : vols) {
        require_same_shape(s, x->shape(), "stack_channels");
        v.insert(v.end(), x->data.values().begin(), x->data.values().end());
    }
    return Tensor(s, static_cast<int>(vols.size()), std::move(v));
}

inline DisplacementField to_field(Tensor t) { return DisplacementField(std::move(t)); }

/// Latent code from (S, T, x_t) at timestep t; t = 0 is the clean-target input.
inline LatentCode diffusion_forward(const ModelWeights& w, const Volume& source, const Volume& target,
                                    const Volume& x_t, int t) {
    require(w.has_diffusion(), "diffusion_forward: model was built in direct mode");
    require(t >= 0, "diffusion_forward: timestep must be non-negative");
    return Volume(w.diffusion().forward(stack_channels({&source, &target, &x_t}), t), source.spacing);
}

/// Displacement field from (S, second). second is the latent code in DDM mode
/// and the target volume in direct mode.
inline DisplacementField deformation_forward(const ModelWeights& w, const Volume& source, const Volume& second) {
    return to_field(w.deformation().forward(stack_channels({&source, &second})));
}

}  // namespace ddm
