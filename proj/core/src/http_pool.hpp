#pragma once

// Internal: blocking pool of HTTP connections to one service, one request in flight per handle.

#include "illusign/errors.hpp"

#include <httplib.h>

#include <chrono>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace illusign::detail {

class HttpPool {
public:
    HttpPool(const std::string& url, int size, std::chrono::seconds timeout) : m_url(url) {
        if (url.empty()) {
            throw ConfigError("remote endpoint url is empty");
        }
        if (size < 1) {
            throw ConfigError("connection pool size must be at least 1");
        }
        for (int i = 0; i < size; ++i) {
            auto client = std::make_unique<httplib::Client>(url);
            if (!client->is_valid()) {
                throw ConfigError("invalid remote endpoint url: " + url);
            }
            client->set_connection_timeout(timeout);
            client->set_read_timeout(timeout);
            client->set_write_timeout(timeout);
            client->set_keep_alive(true);
            client->set_tcp_nodelay(true);
            m_free.push_back(client.get());
            m_clients.push_back(std::move(client));
        }
    }

    class Lease {
    public:
        Lease(HttpPool& pool, httplib::Client* client) : m_pool(pool), m_client(client) {}
        ~Lease() { m_pool.release(m_client); }
        Lease(const Lease&) = delete;
        Lease& operator=(const Lease&) = delete;

        httplib::Client& operator*() const { return *m_client; }
        httplib::Client* operator->() const { return m_client; }

    private:
        HttpPool& m_pool;
        httplib::Client* m_client;
    };

    Lease acquire() {
        std::unique_lock lock(m_mutex);
        m_ready.wait(lock, [&] { return !m_free.empty(); });
        httplib::Client* client = m_free.back();
        m_free.pop_back();
        return Lease(*this, client);
    }

    const std::string& url() const { return m_url; }

    /// Throws AdapterError unless the call produced a 200 response.
    void check(const httplib::Result& result, const std::string& what) const {
        if (!result) {
            throw AdapterError(what + ": request to " + m_url + " failed (" + httplib::to_string(result.error()) + ")");
        }
        if (result->status != 200) {
            throw AdapterError(what + ": " + m_url + " answered " + std::to_string(result->status) + ": " +
                               result->body.substr(0, 300));
        }
    }

private:
    void release(httplib::Client* client) {
        {
            std::lock_guard lock(m_mutex);
            m_free.push_back(client);
        }
        m_ready.notify_one();
    }

    std::string m_url;
    std::vector<std::unique_ptr<httplib::Client>> m_clients;
    std::vector<httplib::Client*> m_free;
    std::mutex m_mutex;
    std::condition_variable m_ready;
};

} // namespace illusign::detail
