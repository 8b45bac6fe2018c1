#include "pban/config_json.hpp"

#include <algorithm>

namespace pban {

void to_json(nlohmann::json& j, const PbanConfig& c) {
    j = nlohmann::json{
        {"channels", c.channels},
        {"blocks", c.blocks},
        {"gmdc_kernels", c.gmdc_kernels},
        {"gmdc_groups", c.gmdc_groups},
        {"offset_predictor_kernel", c.offset_kernel},
        {"subec_upscale", c.subec_upscale},
        {"subec_groups", c.subec_groups},
        {"pool_out", {c.pool_h, c.pool_w}},
        {"head_dims", c.head_dims},
        {"fusion_dims", c.fusion_dims},
        {"dropout_p", c.dropout},
        {"bn_momentum", c.bn_momentum},
        {"bn_eps", c.bn_eps},
        {"patch_size", c.patch_size},
        {"attention_mode", to_string(c.attention)},
        {"variant", to_string(c.variant)},
    };
}

void from_json(const nlohmann::json& j, PbanConfig& c) {
    if (!j.is_object()) throw ParameterError("config JSON must be an object");
    static const char* known[] = {"channels",      "blocks",       "gmdc_kernels", "gmdc_groups",
                                  "offset_predictor_kernel",    "subec_upscale", "subec_groups",
                                  "pool_out",      "head_dims",    "fusion_dims",  "dropout_p",
                                  "bn_momentum",   "bn_eps",       "patch_size",   "attention_mode",
                                  "variant"};
    for (const auto& item : j.items()) {
        if (std::find(std::begin(known), std::end(known), item.key()) == std::end(known)) {
            throw ParameterError("unknown config field '" + item.key() + "'");
        }
    }
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        get("channels", c.channels);
        get("blocks", c.blocks);
        get("gmdc_kernels", c.gmdc_kernels);
        get("gmdc_groups", c.gmdc_groups);
        get("offset_predictor_kernel", c.offset_kernel);
        get("subec_upscale", c.subec_upscale);
        get("subec_groups", c.subec_groups);
        if (j.contains("pool_out")) {
            const auto& p = j.at("pool_out");
            if (!p.is_array() || p.size() != 2) throw ParameterError("pool_out must be [h, w]");
            p.at(0).get_to(c.pool_h);
            p.at(1).get_to(c.pool_w);
        }
        get("head_dims", c.head_dims);
        get("fusion_dims", c.fusion_dims);
        get("dropout_p", c.dropout);
        get("bn_momentum", c.bn_momentum);
        get("bn_eps", c.bn_eps);
        get("patch_size", c.patch_size);
        if (j.contains("attention_mode")) {
            c.attention = parse_attention_mode(j.at("attention_mode").get<std::string>());
        }
        if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ParameterError(std::string("config JSON: ") + e.what());
    }
}

}  // namespace pban
