#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mrmotion/autodiff.hpp"
#include "mrmotion/volume.hpp"

namespace mrmotion::model {

enum class CbamPlacement { Off, EncoderOnly, Both };

// Architecture of the stacked correction network. Input slices are
// grayscale; each input stream gets its own stem producing stem_channels
// feature maps, the concatenation feeds the first U-Net, and the second
// U-Net re-ingests the first prediction alongside fresh stems.
struct NetConfig {
    int levels = 4;
    int stem_channels = 32;
    std::vector<int> encoder_channels = {32, 64, 128, 256};
    int cbam_reduction = 8;
    // 0: center only; 1: center + extra prior; 2: center + adjacent pair;
    // 3: center + adjacent pair + extra prior
    int n_priors = 2;
    bool stacked = true;
    CbamPlacement cbam = CbamPlacement::Both;
    int64_t input_h = 256;
    int64_t input_w = 256;

    void validate() const;
    int n_inputs() const; // input streams of the first stage
    bool uses_extra_prior() const { return n_priors == 1 || n_priors == 3; }
    bool uses_adjacent_priors() const { return n_priors == 2 || n_priors == 3; }

    std::string to_json() const;
    static NetConfig from_json(const std::string& text);
    uint64_t arch_hash() const; // rejects checkpoint/config mismatches
};

// Published total for the paper-scale configuration; reported as a
// diagnostic next to our count, never asserted.
inline constexpr double kPublishedParamCountMillions = 4.01;

template <class T>
class ParamStore {
  public:
    ad::Tensor<T>& add(const std::string& name, ad::Tensor<T> t) {
        if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }
    ad::Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
        return items_[it->second].second;
    }
    const ad::Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
        return items_[it->second].second;
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    std::vector<std::pair<std::string, ad::Tensor<T>>>& items() { return items_; }
    const std::vector<std::pair<std::string, ad::Tensor<T>>>& items() const { return items_; }
    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }
    void zero_grads() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

  private:
    std::vector<std::pair<std::string, ad::Tensor<T>>> items_; // creation order
    std::map<std::string, size_t> index_;
};

template <class T>
using BufferStore = std::map<std::string, ad::BatchNormStats<T>>;

template <class T>
struct StackedOutput {
    ad::Tensor<T> pred1;
    ad::Tensor<T> pred2;
};

// The stacked U-Nets with self-assisted priors and CBAM gating.
template <class T>
class StackedModel {
  public:
    StackedModel(NetConfig cfg, uint64_t seed);

    // inputs are role-ordered [N,1,H,W] tensors:
    //   n_priors 0: {center}
    //   n_priors 1: {center, extra}
    //   n_priors 2: {prev, center, next}
    //   n_priors 3: {prev, center, next, extra}
    StackedOutput<T> forward(const std::vector<ad::Tensor<T>>& inputs, ad::Mode mode);

    NetConfig& config() { return cfg_; }
    const NetConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    BufferStore<T>& buffers() { return buffers_; }
    const BufferStore<T>& buffers() const { return buffers_; }
    int64_t param_count() const { return params_.total_params(); }

  private:
    ad::Tensor<T> conv_bn_relu(ad::Tensor<T> x, const std::string& prefix, ad::Mode mode);
    ad::Tensor<T> cbam(ad::Tensor<T> x, const std::string& prefix);
    ad::Tensor<T> unet(ad::Tensor<T> x, const std::string& prefix, ad::Mode mode);
    ad::Tensor<T> run_stage(const std::vector<ad::Tensor<T>>& streams,
                            const std::string& stage, ad::Mode mode);

    void init_conv(Rng& rng, const std::string& prefix, int64_t cin, int64_t cout, int64_t k);
    void init_bn(const std::string& prefix, int64_t c);
    void init_dense(Rng& rng, const std::string& prefix, int64_t fin, int64_t fout);
    void init_cbam(Rng& rng, const std::string& prefix, int64_t c);
    void init_all(uint64_t seed);

    NetConfig cfg_;
    ParamStore<T> params_;
    BufferStore<T> buffers_;
};

// Exact parameter count for a configuration (builds the parameter set).
int64_t param_count(const NetConfig& cfg);

// ---- implementation ----

template <class T>
StackedModel<T>::StackedModel(NetConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_all(seed);
}

template <class T>
void StackedModel<T>::init_conv(Rng& rng, const std::string& prefix, int64_t cin,
                                int64_t cout, int64_t k) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
    std::vector<T> w(static_cast<size_t>(cout * cin * k * k));
    for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
    params_.add(prefix + ".w", ad::Tensor<T>::from_data({cout, cin, k, k}, std::move(w), true));
    params_.add(prefix + ".b", ad::Tensor<T>::zeros({cout}, true));
}

template <class T>
void StackedModel<T>::init_bn(const std::string& prefix, int64_t c) {
    std::vector<T> ones(static_cast<size_t>(c), T(1));
    params_.add(prefix + ".g", ad::Tensor<T>::from_data({c}, std::move(ones), true));
    params_.add(prefix + ".beta", ad::Tensor<T>::zeros({c}, true));
    buffers_[prefix] = ad::BatchNormStats<T>::identity(c);
}

template <class T>
void StackedModel<T>::init_dense(Rng& rng, const std::string& prefix, int64_t fin, int64_t fout) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fin));
    std::vector<T> w(static_cast<size_t>(fout * fin));
    for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
    params_.add(prefix + ".w", ad::Tensor<T>::from_data({fout, fin}, std::move(w), true));
    params_.add(prefix + ".b", ad::Tensor<T>::zeros({fout}, true));
}

template <class T>
void StackedModel<T>::init_cbam(Rng& rng, const std::string& prefix, int64_t c) {
    const int64_t hidden = c / cfg_.cbam_reduction;
    init_dense(rng, prefix + ".fc1", c, hidden);
    init_dense(rng, prefix + ".fc2", hidden, c);
    init_conv(rng, prefix + ".sconv", 2, 1, 7);
}

template <class T>
void StackedModel<T>::init_all(uint64_t seed) {
    Rng rng(mix_seed(seed, 0x5eedull));
    const int L = cfg_.levels;
    const auto& ch = cfg_.encoder_channels;
    const int n_stages = cfg_.stacked ? 2 : 1;

    for (int s = 1; s <= n_stages; ++s) {
        const std::string sp = "s" + std::to_string(s);
        const int n_streams = cfg_.n_inputs() + (s == 2 ? 1 : 0);
        for (int k = 0; k < n_streams; ++k) {
            const std::string stem = sp + ".stem" + std::to_string(k);
            init_conv(rng, stem, 1, cfg_.stem_channels, 3);
            init_bn(stem + ".bn", cfg_.stem_channels);
        }

        const std::string up = "u" + std::to_string(s);
        int64_t in_ch = static_cast<int64_t>(n_streams) * cfg_.stem_channels;
        for (int l = 0; l < L; ++l) {
            const std::string ep = up + ".enc" + std::to_string(l);
            init_conv(rng, ep + ".c1", l == 0 ? in_ch : ch[static_cast<size_t>(l - 1)],
                      ch[static_cast<size_t>(l)], 3);
            init_bn(ep + ".c1.bn", ch[static_cast<size_t>(l)]);
            init_conv(rng, ep + ".c2", ch[static_cast<size_t>(l)], ch[static_cast<size_t>(l)], 3);
            init_bn(ep + ".c2.bn", ch[static_cast<size_t>(l)]);
            if (cfg_.cbam != CbamPlacement::Off)
                init_cbam(rng, ep + ".cbam", ch[static_cast<size_t>(l)]);
        }
        for (int l = L - 2; l >= 0; --l) {
            const std::string dp = up + ".dec" + std::to_string(l);
            init_conv(rng, dp + ".up", ch[static_cast<size_t>(l + 1)], ch[static_cast<size_t>(l)], 3);
            init_bn(dp + ".up.bn", ch[static_cast<size_t>(l)]);
            init_conv(rng, dp + ".c1", 2 * ch[static_cast<size_t>(l)], ch[static_cast<size_t>(l)], 3);
            init_bn(dp + ".c1.bn", ch[static_cast<size_t>(l)]);
            init_conv(rng, dp + ".c2", ch[static_cast<size_t>(l)], ch[static_cast<size_t>(l)], 3);
            init_bn(dp + ".c2.bn", ch[static_cast<size_t>(l)]);
            if (cfg_.cbam == CbamPlacement::Both)
                init_cbam(rng, dp + ".cbam", ch[static_cast<size_t>(l)]);
        }
        init_conv(rng, up + ".out", ch[0], 1, 3);
    }
}

template <class T>
ad::Tensor<T> StackedModel<T>::conv_bn_relu(ad::Tensor<T> x, const std::string& prefix,
                                            ad::Mode mode) {
    x = ad::conv2d(x, params_.at(prefix + ".w"), params_.at(prefix + ".b"));
    x = ad::batch_norm_2d(x, params_.at(prefix + ".bn.g"), params_.at(prefix + ".bn.beta"),
                          buffers_.at(prefix + ".bn"), mode);
    return ad::relu(x);
}

template <class T>
ad::Tensor<T> StackedModel<T>::cbam(ad::Tensor<T> x, const std::string& prefix) {
    // channel attention: shared two-layer MLP over avg- and max-pooled
    // descriptors, summed, sigmoid-gated
    auto avg_desc = ad::global_avg_pool(x);
    auto max_desc = ad::global_max_pool(x);
    auto& w1 = params_.at(prefix + ".fc1.w");
    auto& b1 = params_.at(prefix + ".fc1.b");
    auto& w2 = params_.at(prefix + ".fc2.w");
    auto& b2 = params_.at(prefix + ".fc2.b");
    auto branch = [&](ad::Tensor<T> d) { return ad::dense(ad::relu(ad::dense(d, w1, b1)), w2, b2); };
    auto channel_gate = ad::sigmoid(ad::add(branch(avg_desc), branch(max_desc)));
    x = ad::scale_channels(x, channel_gate);

    // spatial attention: 7x7 conv over stacked channel-mean/max maps
    auto stacked_maps = ad::concat_channels<T>({ad::channel_mean(x), ad::channel_max(x)});
    auto spatial_gate = ad::sigmoid(
        ad::conv2d(stacked_maps, params_.at(prefix + ".sconv.w"), params_.at(prefix + ".sconv.b")));
    return ad::scale_spatial(x, spatial_gate);
}

template <class T>
ad::Tensor<T> StackedModel<T>::unet(ad::Tensor<T> x, const std::string& up, ad::Mode mode) {
    const int L = cfg_.levels;
    std::vector<ad::Tensor<T>> skips;
    for (int l = 0; l < L; ++l) {
        const std::string ep = up + ".enc" + std::to_string(l);
        x = conv_bn_relu(x, ep + ".c1", mode);
        x = conv_bn_relu(x, ep + ".c2", mode);
        if (cfg_.cbam != CbamPlacement::Off) x = cbam(x, ep + ".cbam");
        if (l < L - 1) {
            skips.push_back(x);
            x = ad::avg_pool_2x2(x);
        }
    }
    for (int l = L - 2; l >= 0; --l) {
        const std::string dp = up + ".dec" + std::to_string(l);
        x = conv_bn_relu(ad::upsample_nearest_2x(x), dp + ".up", mode);
        x = ad::concat_channels<T>({x, skips[static_cast<size_t>(l)]});
        x = conv_bn_relu(x, dp + ".c1", mode);
        x = conv_bn_relu(x, dp + ".c2", mode);
        if (cfg_.cbam == CbamPlacement::Both) x = cbam(x, dp + ".cbam");
    }
    // linear single-channel prediction head
    return ad::conv2d(x, params_.at(up + ".out.w"), params_.at(up + ".out.b"));
}

template <class T>
ad::Tensor<T> StackedModel<T>::run_stage(const std::vector<ad::Tensor<T>>& streams,
                                         const std::string& stage, ad::Mode mode) {
    std::vector<ad::Tensor<T>> features;
    features.reserve(streams.size());
    for (size_t k = 0; k < streams.size(); ++k) {
        const std::string stem = "s" + stage + ".stem" + std::to_string(k);
        features.push_back(conv_bn_relu(streams[k], stem, mode));
    }
    auto x = features.size() == 1 ? features[0] : ad::concat_channels<T>(features);
    return unet(x, "u" + stage, mode);
}

template <class T>
StackedOutput<T> StackedModel<T>::forward(const std::vector<ad::Tensor<T>>& inputs,
                                          ad::Mode mode) {
    if (static_cast<int>(inputs.size()) != cfg_.n_inputs())
        throw ValidationError("stacked_forward: expected " + std::to_string(cfg_.n_inputs()) +
                              " input streams, got " + std::to_string(inputs.size()));
    for (const auto& t : inputs) {
        if (t.shape().size() != 4 || t.dim(1) != 1)
            throw ValidationError("stacked_forward: inputs must be [N,1,H,W]");
        const int64_t div = int64_t{1} << (cfg_.levels - 1);
        if (t.dim(2) % div != 0 || t.dim(3) % div != 0)
            throw ValidationError("stacked_forward: H,W must be divisible by 2^(levels-1)");
    }

    StackedOutput<T> out;
    out.pred1 = run_stage(inputs, "1", mode);
    if (!cfg_.stacked) {
        out.pred2 = out.pred1;
        return out;
    }
    std::vector<ad::Tensor<T>> stage2ctx;
    stage2ctx.reserve(inputs.size() + 1);
    stage2ctx.push_back(out.pred1);
    for (const auto& t : inputs) stage2ctx.push_back(t);
    out.pred2 = run_stage(stage2ctx, "2", mode);
    return out;
}

} // namespace mrmotion::model
