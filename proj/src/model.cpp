#include "mrmotion/model.hpp"

#include <json.hpp>

namespace mrmotion::model {

void NetConfig::validate() const {
    if (levels < 2) throw ValidationError("net config: levels must be >= 2");
    if (static_cast<int>(encoder_channels.size()) != levels)
        throw ValidationError("net config: encoder_channels length must equal levels");
    for (int c : encoder_channels)
        if (c < 1) throw ValidationError("net config: encoder channels must be positive");
    if (stem_channels < 1) throw ValidationError("net config: stem_channels must be >= 1");
    if (n_priors < 0 || n_priors > 3)
        throw ValidationError("net config: n_priors must be in {0,1,2,3}");
    if (cbam != CbamPlacement::Off) {
        if (cbam_reduction < 1) throw ValidationError("net config: cbam_reduction must be >= 1");
        for (int c : encoder_channels)
            if (c % cbam_reduction != 0)
                throw ValidationError("net config: channel count " + std::to_string(c) +
                                      " not divisible by cbam_reduction " +
                                      std::to_string(cbam_reduction));
    }
    const int64_t div = int64_t{1} << (levels - 1);
    if (input_h < div || input_w < div || input_h % div != 0 || input_w % div != 0)
        throw ValidationError("net config: input size must be divisible by 2^(levels-1)");
}

int NetConfig::n_inputs() const {
    switch (n_priors) {
        case 0: return 1;
        case 1: return 2;
        case 2: return 3;
        case 3: return 4;
        default: throw ValidationError("net config: n_priors must be in {0,1,2,3}");
    }
}

namespace {

const char* cbam_name(CbamPlacement p) {
    switch (p) {
        case CbamPlacement::Off: return "off";
        case CbamPlacement::EncoderOnly: return "encoder";
        case CbamPlacement::Both: return "both";
    }
    return "both";
}

CbamPlacement cbam_from_name(const std::string& s) {
    if (s == "off") return CbamPlacement::Off;
    if (s == "encoder") return CbamPlacement::EncoderOnly;
    if (s == "both") return CbamPlacement::Both;
    throw ValidationError("net config: unknown cbam placement '" + s + "'");
}

} // namespace

std::string NetConfig::to_json() const {
    nlohmann::json j = {
        {"levels", levels},
        {"stem_channels", stem_channels},
        {"encoder_channels", encoder_channels},
        {"cbam_reduction", cbam_reduction},
        {"n_priors", n_priors},
        {"stacked", stacked},
        {"cbam", cbam_name(cbam)},
        {"input_size", {input_h, input_w}},
    };
    return j.dump();
}

NetConfig NetConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ValidationError(std::string("net config parse error: ") + e.what());
    }
    NetConfig c;
    c.levels = j.value("levels", c.levels);
    c.stem_channels = j.value("stem_channels", c.stem_channels);
    if (j.contains("encoder_channels"))
        c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
    c.cbam_reduction = j.value("cbam_reduction", c.cbam_reduction);
    c.n_priors = j.value("n_priors", c.n_priors);
    c.stacked = j.value("stacked", c.stacked);
    if (j.contains("cbam")) c.cbam = cbam_from_name(j.at("cbam").get<std::string>());
    if (j.contains("input_size")) {
        c.input_h = j.at("input_size").at(0).get<int64_t>();
        c.input_w = j.at("input_size").at(1).get<int64_t>();
    }
    c.validate();
    return c;
}

uint64_t NetConfig::arch_hash() const {
    const std::string s = to_json();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : s) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
    }
    return h;
}

int64_t param_count(const NetConfig& cfg) {
    StackedModel<float> m(cfg, 0);
    return m.param_count();
}

} // namespace mrmotion::model
