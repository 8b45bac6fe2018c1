#include "pban/features.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <tuple>

#include "pban/errors.hpp"

namespace pban {

std::string stage_slug(const std::string& stage) {
    std::string out;
    for (char c : stage) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            out += char(std::tolower(static_cast<unsigned char>(c)));
        } else if (!out.empty() && out.back() != '_') {
            out += '_';
        }
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

std::vector<std::filesystem::path> dump_features(const ImageRGB& hr, const ImageRGB& sr,
                                                 const NamedWeights<float>& weights, const PbanConfig& config,
                                                 const std::filesystem::path& out_dir) {
    if (hr.width != sr.width || hr.height != sr.height) throw DataError("dump_features: SR and HR sizes differ");
    const auto hr_patches = extract_patches(hr, config.patch_size);
    const auto sr_patches = extract_patches(sr, config.patch_size);
    if (sr_patches.empty()) throw DataError("dump_features: image yields no patch");
    const Index cols = sr.width / config.patch_size;

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) {
        throw IoError("cannot create output directory '" + out_dir.string() + "'");
    }

    // (block, branch, stage) -> per-patch records in patch order.
    std::map<std::tuple<Index, std::string, int>, std::vector<FeatureRecord>> maps;
    for (std::size_t p = 0; p < sr_patches.size(); ++p) {
        std::vector<FeatureRecord> tap;
        ParamSet<float> params(weights);
        ForwardContext<float> ctx{params, config, Mode::eval, nullptr, &tap};
        auto as_batch = [&](const TensorF& t) { return VarF::constant(t.reshaped({1, 3, t.dim(1), t.dim(2)})); };
        model_forward(ctx, as_batch(hr_patches[p]), as_batch(sr_patches[p]));
        for (auto& rec : tap) maps[{rec.block, rec.branch, rec.stage}].push_back(std::move(rec));
    }

    std::vector<std::filesystem::path> written;
    for (const auto& [key, recs] : maps) {
        const auto& [block, branch, stage] = key;
        const Index h = recs[0].height, w = recs[0].width;
        const Index rows = Index(recs.size()) / cols;
        const Index width = cols * w, height = rows * h;
        std::vector<double> mosaic(std::size_t(width * height));
        for (Index i = 0; i < Index(recs.size()); ++i) {
            const Index oy = (i / cols) * h, ox = (i % cols) * w;
            for (Index y = 0; y < h; ++y)
                for (Index x = 0; x < w; ++x)
                    mosaic[std::size_t((oy + y) * width + ox + x)] = recs[std::size_t(i)].values[std::size_t(y * w + x)];
        }
        const auto [lo, hi] = std::minmax_element(mosaic.begin(), mosaic.end());
        const double span = *hi - *lo;
        std::vector<std::uint8_t> pixels(mosaic.size(), 0);
        if (span > 0) {
            for (std::size_t i = 0; i < mosaic.size(); ++i) {
                pixels[i] = std::uint8_t(std::lround(255.0 * (mosaic[i] - *lo) / span));
            }
        }
        const auto path = out_dir / ("block" + std::to_string(block) + "_" + branch + "_" + std::to_string(stage) + "_" +
                                     stage_slug(feature_stage_names()[std::size_t(stage)]) + ".png");
        write_file(path, encode_png_gray(width, height, pixels));
        written.push_back(path);
    }
    return written;
}

}  // namespace pban
