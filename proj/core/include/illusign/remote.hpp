#pragma once

#include "illusign/backbone.hpp"

#include <chrono>
#include <memory>
#include <string>

namespace illusign {

/// An HTTP model service. Clients hold a pool of connections and each connection carries at
/// most one request at a time.
struct RemoteEndpoint {
    std::string url;  ///< e.g. "http://127.0.0.1:8700"
    int pool_size = 2;
    std::chrono::seconds timeout{120};
};

/// Denoiser whose model runs in another process.
///
/// A noise prediction opens a session on the server. Each time the model reaches a layer
/// that this client wants to hook, the server suspends and sends q/k/v back. The hooks then
/// run locally, and the edited tensor is posted back to resume the model. Hook callbacks
/// therefore run in the calling process exactly as they would with a local backbone.
class RemoteBackbone final : public Denoiser {
public:
    /// Fetches the backbone description; throws AdapterError when the service is unreachable.
    explicit RemoteBackbone(const RemoteEndpoint& endpoint, BackboneOptions options = {});
    ~RemoteBackbone() override;

    const std::string& url() const;

protected:
    Latent do_encode(const Image& image) const override;
    Image do_decode(const Latent& latent) const override;
    std::vector<float> do_embed(std::string_view text) const override;
    Latent do_predict_noise(const Latent& z_t, int t, int steps, const PromptEmbedding& prompt,
                            const PromptEmbedding& unconditional, double guidance_scale,
                            const HookDispatcher& hooks) override;

private:
    struct Impl;
    std::unique_ptr<Impl> m_impl;
};

/// Serves a Denoiser to RemoteBackbone clients. Predictions are serialised because a
/// Denoiser serves one worker at a time. A session whose client stops answering is
/// abandoned after `session_timeout`.
class BackboneServer {
public:
    explicit BackboneServer(Denoiser& denoiser, std::chrono::seconds session_timeout = std::chrono::seconds(60));
    ~BackboneServer();
    BackboneServer(const BackboneServer&) = delete;
    BackboneServer& operator=(const BackboneServer&) = delete;

    /// Binds (port 0 picks a free port) and serves on a background thread. Returns the port.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    /// Serves on the calling thread until stop().
    void listen(const std::string& host, int port);
    void stop();

    std::size_t open_sessions() const;

private:
    struct Impl;
    std::unique_ptr<Impl> m_impl;
};

// Wire format helpers, exposed for tests and alternative servers.
std::string backbone_info_to_json(const BackboneInfo& info);
BackboneInfo backbone_info_from_json(std::string_view text);

} // namespace illusign
