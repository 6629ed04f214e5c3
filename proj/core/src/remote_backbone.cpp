#include "illusign/remote.hpp"

#include "illusign/errors.hpp"
#include "illusign/hashing.hpp"

#include "http_pool.hpp"

#include <algorithm>
#include <bit>
#include <condition_variable>
#include <cstring>
#include <map>
#include <mutex>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace illusign {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

namespace {

std::string pack(std::span<const float> values) {
    std::vector<std::uint8_t> bytes(values.size() * sizeof(float));
    std::memcpy(bytes.data(), values.data(), bytes.size());
    return base64_encode(bytes);
}

std::vector<float> unpack(const json& j, std::size_t expected) {
    const auto bytes = base64_decode(j.get<std::string>());
    if (bytes.size() != expected * sizeof(float)) {
        throw ContractError(fmt::format("payload has {} bytes, expected {} floats", bytes.size(), expected));
    }
    std::vector<float> out(expected);
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

json to_json(const Latent& z) {
    return {{"channels", z.channels}, {"height", z.height}, {"width", z.width}, {"data", pack(z.data)}};
}

Latent latent_from(const json& j) {
    Latent z = Latent::zeros(j.at("channels").get<int>(), j.at("height").get<int>(), j.at("width").get<int>());
    z.data = unpack(j.at("data"), z.size());
    return z;
}

json to_json(const FeatureTensor& f) {
    return {{"heads", f.heads}, {"height", f.height}, {"width", f.width}, {"channels", f.channels},
            {"data", pack(f.data)}};
}

FeatureTensor feature_from(const json& j) {
    FeatureTensor f = FeatureTensor::zeros(j.at("heads").get<int>(), j.at("height").get<int>(),
                                           j.at("width").get<int>(), j.at("channels").get<int>());
    f.data = unpack(j.at("data"), f.size());
    return f;
}

json to_json(const AttentionTensor& a) {
    json j{{"layer", a.layer_id}, {"timestep", a.timestep}, {"q", to_json(a.q)}, {"k", to_json(a.k)},
           {"v", to_json(a.v)}};
    if (a.out) {
        j["out"] = to_json(*a.out);
    }
    return j;
}

AttentionTensor attention_from(const json& j) {
    AttentionTensor a;
    a.layer_id = j.at("layer").get<std::string>();
    a.timestep = j.at("timestep").get<int>();
    a.q = feature_from(j.at("q"));
    a.k = feature_from(j.at("k"));
    a.v = feature_from(j.at("v"));
    if (j.contains("out")) {
        a.out = feature_from(j.at("out"));
    }
    return a;
}

json parse_body(const std::string& body) {
    try {
        return json::parse(body);
    } catch (const json::exception& e) {
        throw ContractError(fmt::format("malformed message: {}", e.what()));
    }
}

std::string as_string(const std::vector<std::uint8_t>& bytes) { return {bytes.begin(), bytes.end()}; }

std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

json error_json(ErrorKind kind, const std::string& message) {
    return {{"status", "error"}, {"error", to_string(kind)}, {"message", message}};
}

int status_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Configuration:
    case ErrorKind::Contract:
    case ErrorKind::Hook:
        return 422;
    default:
        return 502;
    }
}

} // namespace

std::string backbone_info_to_json(const BackboneInfo& info) {
    json layers = json::array();
    for (const auto& l : info.layers) {
        layers.push_back({{"id", l.id},
                          {"resolution", l.resolution},
                          {"decoder", l.decoder},
                          {"self_attention", l.self_attention}});
    }
    return json{{"image_size", info.image_size},
                {"latent_size", info.latent_size},
                {"latent_channels", info.latent_channels},
                {"heads", info.heads},
                {"head_channels", info.head_channels},
                {"timestep_count", info.timestep_count},
                {"train_timesteps", info.train_timesteps},
                {"layers", layers}}
        .dump();
}

BackboneInfo backbone_info_from_json(std::string_view text) {
    const json j = parse_body(std::string(text));
    try {
        BackboneInfo info;
        info.image_size = j.at("image_size").get<int>();
        info.latent_size = j.at("latent_size").get<int>();
        info.latent_channels = j.at("latent_channels").get<int>();
        info.heads = j.at("heads").get<int>();
        info.head_channels = j.at("head_channels").get<int>();
        info.timestep_count = j.at("timestep_count").get<int>();
        info.train_timesteps = j.value("train_timesteps", 1000);
        for (const auto& l : j.at("layers")) {
            LayerInfo layer;
            layer.id = l.at("id").get<std::string>();
            layer.resolution = l.at("resolution").get<int>();
            layer.decoder = l.at("decoder").get<bool>();
            layer.self_attention = l.at("self_attention").get<bool>();
            info.layers.push_back(std::move(layer));
        }
        return info;
    } catch (const json::exception& e) {
        throw ContractError(fmt::format("malformed backbone description: {}", e.what()));
    }
}

// Client

struct RemoteBackbone::Impl {
    detail::HttpPool pool;

    Impl(const RemoteEndpoint& endpoint) : pool(endpoint.url, endpoint.pool_size, endpoint.timeout) {}

    // Contract failures reported by the server come back as ContractError, anything else
    // (transport, model failure) as AdapterError.
    void check(const httplib::Result& res, const std::string& what) const {
        if (res && res->status == 422) {
            json j = json::parse(res->body, nullptr, false);
            const std::string message = j.is_object() ? j.value("message", res->body) : res->body;
            throw ContractError(fmt::format("{}: {}", what, message));
        }
        pool.check(res, what);
    }

    json post_json(httplib::Client& client, const std::string& path, const json& body, const std::string& what) const {
        auto res = client.Post(path, body.dump(), "application/json");
        check(res, what);
        return parse_body(res->body);
    }
};

RemoteBackbone::RemoteBackbone(const RemoteEndpoint& endpoint, BackboneOptions options)
    : Denoiser(options), m_impl(std::make_unique<Impl>(endpoint)) {
    auto client = m_impl->pool.acquire();
    auto res = client->Get("/v1/info");
    m_impl->check(res, "backbone description");
    set_info(backbone_info_from_json(res->body));
}

RemoteBackbone::~RemoteBackbone() = default;

const std::string& RemoteBackbone::url() const { return m_impl->pool.url(); }

Latent RemoteBackbone::do_encode(const Image& image) const {
    auto client = m_impl->pool.acquire();
    auto res = client->Post("/v1/encode", as_string(encode_png(image)), "image/png");
    m_impl->check(res, "encode");
    return latent_from(parse_body(res->body));
}

Image RemoteBackbone::do_decode(const Latent& latent) const {
    auto client = m_impl->pool.acquire();
    auto res = client->Post("/v1/decode", to_json(latent).dump(), "application/json");
    m_impl->check(res, "decode");
    return decode_image(as_bytes(res->body));
}

std::vector<float> RemoteBackbone::do_embed(std::string_view text) const {
    auto client = m_impl->pool.acquire();
    const json j = m_impl->post_json(*client, "/v1/embed", json{{"text", text}}, "embed");
    const auto bytes = base64_decode(j.at("values").get<std::string>());
    std::vector<float> values(bytes.size() / sizeof(float));
    std::memcpy(values.data(), bytes.data(), values.size() * sizeof(float));
    return values;
}

Latent RemoteBackbone::do_predict_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt,
                                        const PromptEmbedding&, double guidance_scale, const HookDispatcher& hooks) {
    std::map<std::string, const LayerInfo*> wanted;
    json ids = json::array();
    for (const auto& layer : info().layers) {
        if (hooks.wants(layer)) {
            wanted[layer.id] = &layer;
            ids.push_back(layer.id);
        }
    }
    const json request{{"z", to_json(z_t)},
                       {"t", t},
                       {"steps", steps},
                       {"guidance", guidance_scale},
                       {"prompt", {{"text", prompt.text}, {"values", pack(prompt.values)}}},
                       {"hook_layers", ids}};
    // One connection carries the whole session.
    auto client = m_impl->pool.acquire();
    json reply = m_impl->post_json(*client, "/v1/predict", request, "predict");
    while (reply.value("status", "") == "hook") {
        const std::string session = reply.at("session").get<std::string>();
        AttentionTensor tensor = attention_from(reply.at("tensor"));
        try {
            const auto it = wanted.find(tensor.layer_id);
            if (it == wanted.end()) {
                throw ContractError(fmt::format("server paused at layer '{}' which was not requested", tensor.layer_id));
            }
            hooks.dispatch(*it->second, tensor);
        } catch (...) {
            client->Post("/v1/cancel", json{{"session", session}}.dump(), "application/json");
            throw;
        }
        reply = m_impl->post_json(*client, "/v1/resume", json{{"session", session}, {"tensor", to_json(tensor)}},
                                  "resume");
    }
    if (reply.value("status", "") != "done") {
        throw AdapterError(fmt::format("unexpected predict reply: {}", reply.dump().substr(0, 200)));
    }
    return latent_from(reply.at("eps"));
}

// Server

namespace {

struct Session {
    std::mutex mutex;
    std::condition_variable changed;
    std::optional<AttentionTensor> to_client;
    std::optional<AttentionTensor> from_client;
    bool cancelled = false;
    bool finished = false;
    std::optional<Latent> eps;
    ErrorKind error_kind = ErrorKind::Stage;
    std::string error;
    std::chrono::steady_clock::time_point touched = std::chrono::steady_clock::now();
    std::thread worker;
};

} // namespace

struct BackboneServer::Impl {
    Denoiser& denoiser;
    std::chrono::seconds session_timeout;
    std::mutex model_mutex;
    mutable std::mutex sessions_mutex;
    std::map<std::string, std::shared_ptr<Session>> sessions;
    std::uint64_t next_id = 0;
    httplib::Server server;
    std::thread thread;

    Impl(Denoiser& d, std::chrono::seconds timeout) : denoiser(d), session_timeout(timeout) {}

    std::shared_ptr<Session> find(const std::string& id) {
        std::lock_guard lock(sessions_mutex);
        auto it = sessions.find(id);
        return it == sessions.end() ? nullptr : it->second;
    }

    void retire(const std::string& id) {
        std::shared_ptr<Session> s;
        {
            std::lock_guard lock(sessions_mutex);
            auto it = sessions.find(id);
            if (it == sessions.end()) {
                return;
            }
            s = it->second;
            sessions.erase(it);
        }
        {
            std::lock_guard lock(s->mutex);
            s->cancelled = true;
        }
        s->changed.notify_all();
        if (s->worker.joinable()) {
            s->worker.join();
        }
    }

    // Drops sessions whose client went away.
    void reap() {
        std::vector<std::string> stale;
        {
            std::lock_guard lock(sessions_mutex);
            const auto now = std::chrono::steady_clock::now();
            for (auto& [id, s] : sessions) {
                std::lock_guard sl(s->mutex);
                if (s->finished && now - s->touched > session_timeout) {
                    stale.push_back(id);
                }
            }
        }
        for (const auto& id : stale) {
            retire(id);
        }
    }

    void start_session(const std::string& id, const std::shared_ptr<Session>& s, Latent z, int t, int steps,
                       PromptEmbedding prompt, double guidance, std::vector<std::string> layer_ids) {
        s->worker = std::thread([this, s, z = std::move(z), t, steps, prompt = std::move(prompt), guidance,
                                 layer_ids = std::move(layer_ids), id] {
            try {
                HookSpec spec;
                spec.layer_predicate = layers_with_ids(layer_ids);
                spec.window = {t - 1, t - 1};
                spec.callback = [this, s](AttentionTensor tensor) {
                    std::unique_lock lock(s->mutex);
                    s->to_client = std::move(tensor);
                    s->touched = std::chrono::steady_clock::now();
                    s->changed.notify_all();
                    const bool answered = s->changed.wait_for(
                        lock, session_timeout, [&] { return s->from_client.has_value() || s->cancelled; });
                    if (!answered || s->cancelled) {
                        throw AdapterError(answered ? "session cancelled" : "client did not answer a hook in time");
                    }
                    AttentionTensor edited = std::move(*s->from_client);
                    s->from_client.reset();
                    return edited;
                };
                std::span<const HookSpec> hooks;
                if (!layer_ids.empty()) {
                    hooks = std::span(&spec, 1);
                }
                std::lock_guard model(model_mutex);
                Latent eps = denoiser.predict_noise(z, t, steps, prompt, guidance, hooks);
                std::lock_guard lock(s->mutex);
                s->eps = std::move(eps);
            } catch (const Error& e) {
                std::lock_guard lock(s->mutex);
                s->error_kind = e.kind();
                s->error = e.what();
            } catch (const std::exception& e) {
                std::lock_guard lock(s->mutex);
                s->error = e.what();
            }
            {
                std::lock_guard lock(s->mutex);
                s->finished = true;
                s->touched = std::chrono::steady_clock::now();
            }
            s->changed.notify_all();
            if (!s->eps && s->error.find("cancelled") == std::string::npos) {
                spdlog::warn("predict session {} failed: {}", id, s->error);
            }
        });
    }

    // Waits for the session's next pause or its end and writes the reply.
    void reply(const std::string& id, const std::shared_ptr<Session>& s, httplib::Response& res) {
        std::unique_lock lock(s->mutex);
        s->changed.wait(lock, [&] { return s->to_client.has_value() || s->finished; });
        s->touched = std::chrono::steady_clock::now();
        if (s->to_client) {
            json j{{"status", "hook"}, {"session", id}, {"tensor", to_json(*s->to_client)}};
            s->to_client.reset();
            lock.unlock();
            res.set_content(j.dump(), "application/json");
            return;
        }
        json j;
        if (s->eps) {
            j = {{"status", "done"}, {"eps", to_json(*s->eps)}};
        } else {
            res.status = status_for(s->error_kind);
            j = error_json(s->error_kind, s->error);
        }
        lock.unlock();
        retire(id);
        res.set_content(j.dump(), "application/json");
    }

    template <class F>
    void guarded(httplib::Response& res, F&& body) {
        try {
            body();
        } catch (const Error& e) {
            res.status = status_for(e.kind());
            res.set_content(error_json(e.kind(), e.what()).dump(), "application/json");
        } catch (const json::exception& e) {
            res.status = 422;
            res.set_content(error_json(ErrorKind::Contract, e.what()).dump(), "application/json");
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(error_json(ErrorKind::Stage, e.what()).dump(), "application/json");
        }
    }

    void routes() {
        server.Get("/v1/info", [this](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] { res.set_content(backbone_info_to_json(denoiser.info()), "application/json"); });
        });
        server.Post("/v1/encode", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const Image img = decode_image(as_bytes(req.body));
                std::lock_guard model(model_mutex);
                res.set_content(to_json(denoiser.encode(img)).dump(), "application/json");
            });
        });
        server.Post("/v1/decode", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const Latent z = latent_from(parse_body(req.body));
                std::lock_guard model(model_mutex);
                res.set_content(as_string(encode_png(denoiser.decode(z))), "image/png");
            });
        });
        server.Post("/v1/embed", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const auto text = parse_body(req.body).at("text").get<std::string>();
                const auto emb = denoiser.embed_prompt(text);
                res.set_content(json{{"values", pack(emb.values)}}.dump(), "application/json");
            });
        });
        server.Post("/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                reap();
                const json j = parse_body(req.body);
                PromptEmbedding prompt;
                prompt.text = j.at("prompt").at("text").get<std::string>();
                const auto bytes = base64_decode(j.at("prompt").at("values").get<std::string>());
                prompt.values.resize(bytes.size() / sizeof(float));
                std::memcpy(prompt.values.data(), bytes.data(), prompt.values.size() * sizeof(float));
                auto s = std::make_shared<Session>();
                std::string id;
                {
                    std::lock_guard lock(sessions_mutex);
                    id = fmt::format("s{}", next_id++);
                    sessions[id] = s;
                }
                start_session(id, s, latent_from(j.at("z")), j.at("t").get<int>(), j.at("steps").get<int>(),
                              std::move(prompt), j.at("guidance").get<double>(),
                              j.at("hook_layers").get<std::vector<std::string>>());
                reply(id, s, res);
            });
        });
        server.Post("/v1/resume", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                const json j = parse_body(req.body);
                const std::string id = j.at("session").get<std::string>();
                auto s = find(id);
                if (!s) {
                    throw ContractError(fmt::format("unknown session '{}'", id));
                }
                AttentionTensor tensor = attention_from(j.at("tensor"));
                {
                    std::lock_guard lock(s->mutex);
                    s->from_client = std::move(tensor);
                }
                s->changed.notify_all();
                reply(id, s, res);
            });
        });
        server.Post("/v1/cancel", [this](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
                retire(parse_body(req.body).at("session").get<std::string>());
                res.set_content(R"({"status":"cancelled"})", "application/json");
            });
        });
    }
};

BackboneServer::BackboneServer(Denoiser& denoiser, std::chrono::seconds session_timeout)
    : m_impl(std::make_unique<Impl>(denoiser, session_timeout)) {
    m_impl->server.set_keep_alive_timeout(2);
    m_impl->server.set_tcp_nodelay(true);
    m_impl->routes();
}

BackboneServer::~BackboneServer() { stop(); }

int BackboneServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = m_impl->server.bind_to_any_port(host);
    } else if (!m_impl->server.bind_to_port(host, port)) {
        bound = -1;
    }
    if (bound < 0) {
        throw IoError(fmt::format("cannot bind {}:{}", host, port));
    }
    m_impl->thread = std::thread([this] { m_impl->server.listen_after_bind(); });
    m_impl->server.wait_until_ready();
    return bound;
}

void BackboneServer::listen(const std::string& host, int port) {
    if (!m_impl->server.listen(host, port)) {
        throw IoError(fmt::format("cannot listen on {}:{}", host, port));
    }
}

void BackboneServer::stop() {
    m_impl->server.stop();
    if (m_impl->thread.joinable()) {
        m_impl->thread.join();
    }
    std::vector<std::string> ids;
    {
        std::lock_guard lock(m_impl->sessions_mutex);
        for (const auto& [id, s] : m_impl->sessions) {
            ids.push_back(id);
        }
    }
    for (const auto& id : ids) {
        m_impl->retire(id);
    }
}

std::size_t BackboneServer::open_sessions() const {
    std::lock_guard lock(m_impl->sessions_mutex);
    return m_impl->sessions.size();
}

} // namespace illusign
