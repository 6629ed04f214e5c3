#include "illusign/inversion.hpp"

#include "illusign/errors.hpp"
#include "illusign/hashing.hpp"
#include "illusign/rng.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

namespace illusign {

const char* to_string(SourceTag tag) {
    switch (tag) {
    case SourceTag::Img: return "img";
    case SourceTag::Edges: return "edges";
    case SourceTag::Style: return "style";
    case SourceTag::Illustration1: return "illustration_1";
    case SourceTag::Illustration2: return "illustration_2";
    }
    return "img";
}

SourceTag parse_source_tag(std::string_view text) {
    for (auto tag : {SourceTag::Img, SourceTag::Edges, SourceTag::Style, SourceTag::Illustration1,
                     SourceTag::Illustration2}) {
        if (text == to_string(tag)) {
            return tag;
        }
    }
    throw ConfigError(fmt::format("unknown trajectory source tag '{}'", text));
}

std::string LatentTrajectory::checksum() const {
    Sha256 hasher;
    for (const auto& latent : z) {
        hasher.update_floats(latent.data);
    }
    for (const auto& n : noise) {
        hasher.update_floats(n.data);
    }
    return hasher.hex();
}

namespace {

// Smallest-error float32 noise n with fl32(mu + sigma * n) == target when one exists.
float solve_noise(double mu, double sigma, float target) {
    float n = static_cast<float>((static_cast<double>(target) - mu) / sigma);
    if (!std::isfinite(n)) {
        return n;
    }
    float best = n;
    double best_err = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 64; ++i) {
        const float r = apply_noise(mu, sigma, n);
        const double err = std::abs(static_cast<double>(r) - target);
        if (err < best_err) {
            best_err = err;
            best = n;
        }
        if (r == target) {
            return n;
        }
        n = std::nextafter(n, r < target ? std::numeric_limits<float>::infinity()
                                         : -std::numeric_limits<float>::infinity());
    }
    return best;
}

} // namespace

LatentTrajectory invert(Denoiser& denoiser, const Latent& source, int steps, const PromptEmbedding& prompt,
                        const InversionOptions& options) {
    if (steps < 1) {
        throw ConfigError("inversion needs at least one step");
    }
    const auto& meta = denoiser.info();
    if (source.channels != meta.latent_channels || source.height != meta.latent_size ||
        source.width != meta.latent_size) {
        throw ContractError(fmt::format("source latent {} does not match backbone", shape_string(source)));
    }
    if (!all_finite(source.data)) {
        throw InversionError(0, "source latent is not finite");
    }

    const NoiseSchedule schedule(steps, meta.train_timesteps);
    GaussianRng rng(options.seed);

    // Independent forward samples z_t ~ q(z_t | z_0), t = 1..T.
    std::vector<Latent> targets(static_cast<std::size_t>(steps) + 1);
    targets[0] = source;
    for (int t = 1; t <= steps; ++t) {
        const Latent eps = rng.normal_latent(source.channels, source.height, source.width);
        targets[static_cast<std::size_t>(t)] = add_noise(schedule, source, eps, t);
    }

    LatentTrajectory trajectory;
    trajectory.source_tag = options.tag;
    trajectory.seed = options.seed;
    trajectory.guidance_scale = options.guidance_scale;
    trajectory.prompt = prompt.text;
    trajectory.z.resize(static_cast<std::size_t>(steps) + 1);
    trajectory.noise.resize(static_cast<std::size_t>(steps));
    trajectory.z[static_cast<std::size_t>(steps)] = targets[static_cast<std::size_t>(steps)];

    for (int t = steps; t >= 1; --t) {
        const Latent& z_t = trajectory.z[static_cast<std::size_t>(t)];
        const Latent eps = denoiser.predict_noise(z_t, t, steps, prompt, options.guidance_scale);
        if (!all_finite(eps.data)) {
            throw InversionError(t, "noise prediction is not finite");
        }
        const auto mean = step_mean(schedule, z_t, eps, t);
        const double sigma = schedule.sigma(t);
        const Latent& target = targets[static_cast<std::size_t>(t - 1)];

        Latent noise = Latent::zeros(source.channels, source.height, source.width);
        for (std::size_t i = 0; i < noise.size(); ++i) {
            noise.data[i] = solve_noise(mean[i], sigma, target.data[i]);
        }
        Latent next = finish_step(z_t, mean, sigma, &noise);
        if (!all_finite(noise.data) || !all_finite(next.data)) {
            throw InversionError(t, "latent became non-finite");
        }
        trajectory.noise[static_cast<std::size_t>(t - 1)] = std::move(noise);
        trajectory.z[static_cast<std::size_t>(t - 1)] = std::move(next);
    }
    return trajectory;
}

std::size_t unreachable_elements(const LatentTrajectory& trajectory, const Latent& source) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < source.size(); ++i) {
        count += trajectory.clean().data[i] != source.data[i] ? 1 : 0;
    }
    return count;
}

Latent replay(Denoiser& denoiser, const LatentTrajectory& trajectory, const ReplayOptions& options) {
    const int steps = trajectory.steps();
    const int start = options.start_t < 0 ? steps : options.start_t;
    if (start > steps) {
        throw ContractError(fmt::format("replay start {} exceeds trajectory length {}", start, steps));
    }
    Latent z = trajectory.z[static_cast<std::size_t>(start)];
    if (start == 0) {
        return z;
    }
    const NoiseSchedule schedule(steps, denoiser.info().train_timesteps);
    const PromptEmbedding prompt =
        denoiser.embed_prompt(options.prompt.empty() ? trajectory.prompt : options.prompt);
    for (int t = start; t >= 1; --t) {
        if (options.before_step) {
            options.before_step(t, z);
        }
        z = denoise_step(denoiser, schedule, z, t, prompt, options.guidance_scale, options.hooks,
                         &trajectory.noise_at(t));
        if (options.after_step) {
            options.after_step(t, z);
        }
    }
    return z;
}

Latent replay(Denoiser& denoiser, const LatentTrajectory& trajectory, std::span<const HookSpec> hooks,
              double guidance_scale, int start_t) {
    ReplayOptions options;
    options.hooks = hooks;
    options.guidance_scale = guidance_scale;
    options.start_t = start_t;
    return replay(denoiser, trajectory, options);
}

void check_compatible(const LatentTrajectory& a, const LatentTrajectory& b) {
    if (a.steps() != b.steps()) {
        throw ContractError(fmt::format("trajectory lengths differ: {} vs {}", a.steps(), b.steps()));
    }
    if (a.z.empty() || !a.clean().same_shape(b.clean())) {
        throw ContractError("trajectory latent shapes differ");
    }
}

namespace {

static_assert(std::endian::native == std::endian::little, "raw float32 files are little-endian");

void write_floats(const std::filesystem::path& path, const Latent& latent) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(reinterpret_cast<const char*>(latent.data.data()),
              static_cast<std::streamsize>(latent.data.size() * sizeof(float)));
}

Latent read_floats(const std::filesystem::path& path, int c, int h, int w) {
    Latent latent = Latent::zeros(c, h, w);
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    const auto bytes = static_cast<std::streamsize>(latent.data.size() * sizeof(float));
    in.read(reinterpret_cast<char*>(latent.data.data()), bytes);
    if (in.gcount() != bytes || in.peek() != std::char_traits<char>::eof()) {
        throw IoError(fmt::format("{} does not hold {} float32 values", path.string(), latent.data.size()));
    }
    return latent;
}

} // namespace

void save_trajectory(const LatentTrajectory& trajectory, const std::filesystem::path& dir) {
    if (trajectory.z.empty() || trajectory.noise.size() + 1 != trajectory.z.size()) {
        throw ContractError("trajectory is malformed");
    }
    std::filesystem::create_directories(dir);
    const Latent& shape = trajectory.clean();
    for (int t = 0; t <= trajectory.steps(); ++t) {
        write_floats(dir / fmt::format("z_{:03}.bin", t), trajectory.z[static_cast<std::size_t>(t)]);
    }
    for (int t = 1; t <= trajectory.steps(); ++t) {
        write_floats(dir / fmt::format("n_{:03}.bin", t), trajectory.noise_at(t));
    }
    nlohmann::ordered_json manifest;
    manifest["format"] = "illusign.trajectory";
    manifest["version"] = 1;
    manifest["shape"] = {shape.channels, shape.height, shape.width};
    manifest["T"] = trajectory.steps();
    manifest["seed"] = trajectory.seed;
    manifest["source_tag"] = to_string(trajectory.source_tag);
    manifest["guidance_scale"] = trajectory.guidance_scale;
    manifest["prompt"] = trajectory.prompt;
    manifest["checksum"] = trajectory.checksum();
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << manifest.dump(2) << '\n';
}

LatentTrajectory load_trajectory(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) {
        throw IoError("no trajectory manifest in " + dir.string());
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(fmt::format("bad trajectory manifest in {}: {}", dir.string(), e.what()));
    }
    if (manifest.value("format", "") != "illusign.trajectory") {
        throw IoError("not a trajectory manifest: " + dir.string());
    }
    const auto shape = manifest.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) {
        throw IoError("trajectory shape must have three entries");
    }
    const int steps = manifest.at("T").get<int>();
    LatentTrajectory trajectory;
    trajectory.seed = manifest.at("seed").get<std::uint64_t>();
    trajectory.source_tag = parse_source_tag(manifest.at("source_tag").get<std::string>());
    trajectory.guidance_scale = manifest.at("guidance_scale").get<double>();
    trajectory.prompt = manifest.at("prompt").get<std::string>();
    for (int t = 0; t <= steps; ++t) {
        trajectory.z.push_back(read_floats(dir / fmt::format("z_{:03}.bin", t), shape[0], shape[1], shape[2]));
    }
    for (int t = 1; t <= steps; ++t) {
        trajectory.noise.push_back(read_floats(dir / fmt::format("n_{:03}.bin", t), shape[0], shape[1], shape[2]));
    }
    if (trajectory.checksum() != manifest.at("checksum").get<std::string>()) {
        throw IoError("trajectory checksum mismatch in " + dir.string());
    }
    return trajectory;
}

} // namespace illusign
