#pragma once

#include "gateway/manager.hpp"
#include "gateway/meter.hpp"
#include "gateway/net.hpp"
#include "gateway/proxy.hpp"
#include "gateway/store.hpp"

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <cerrno>

#include <fmt/format.h>
#include <sys/socket.h>
#include <unistd.h>

namespace gateway::testing {

/// In-memory SessionStore; can be switched to fail writes.
class MemoryStore final : public SessionStore {
public:
    void put_client(const ClientRecord& c) override
    {
        std::lock_guard lock(mu_);
        if (failing_)
            throw StoreError("store offline");
        clients_[c.ip] = c;
    }
    void put_session(const SessionRecord& s) override
    {
        std::lock_guard lock(mu_);
        if (failing_)
            throw StoreError("store offline");
        if (!sessions_.contains(s.session_id))
            sessions_[s.session_id] = s;
        ++writes_;
    }
    std::vector<SessionRecord> load_sessions() override
    {
        std::lock_guard lock(mu_);
        std::vector<SessionRecord> out;
        for (const auto& [id, s] : sessions_)
            out.push_back(s);
        return out;
    }
    std::vector<ClientRecord> load_clients() override
    {
        std::lock_guard lock(mu_);
        std::vector<ClientRecord> out;
        for (const auto& [ip, c] : clients_)
            out.push_back(c);
        return out;
    }
    void set_failing(bool f)
    {
        std::lock_guard lock(mu_);
        failing_ = f;
    }
    std::size_t session_rows()
    {
        std::lock_guard lock(mu_);
        return sessions_.size();
    }

private:
    std::mutex mu_;
    bool failing_ = false;
    std::map<Ipv4Address, ClientRecord> clients_;
    std::map<std::string, SessionRecord> sessions_;
    std::size_t writes_ = 0;
};

/// Prober answering with a settable responder set.
class ScriptedProber final : public Prober {
public:
    std::optional<std::set<Ipv4Address>> probe(const std::vector<Ipv4Address>& candidates) override
    {
        std::lock_guard lock(mu_);
        ++rounds_;
        if (broken_)
            return std::nullopt;
        std::set<Ipv4Address> out;
        for (auto ip : candidates) {
            if (responders_.contains(ip))
                out.insert(ip);
        }
        return out;
    }
    void set_responders(std::set<Ipv4Address> r)
    {
        std::lock_guard lock(mu_);
        responders_ = std::move(r);
    }
    void set_broken(bool b)
    {
        std::lock_guard lock(mu_);
        broken_ = b;
    }
    int rounds()
    {
        std::lock_guard lock(mu_);
        return rounds_;
    }

private:
    std::mutex mu_;
    std::set<Ipv4Address> responders_;
    bool broken_ = false;
    int rounds_ = 0;
};

/// Dials loopback ports directly (hostnames are mapped through `routes`), counting attempts.
class CountingDialer final : public Dialer {
public:
    Socket dial(const TargetAddress& target, Millis timeout) override
    {
        ++attempts;
        if (fail_with)
            throw DialError(*fail_with, "injected failure");
        Endpoint ep{Ipv4Address{127, 0, 0, 1}, target.port};
        {
            std::lock_guard lock(mu);
            if (auto it = routes.find(target.host); it != routes.end())
                ep = it->second;
            else if (auto ip = Ipv4Address::parse(target.host))
                ep.address = *ip;
        }
        try {
            return connect_tcp(ep, std::nullopt, timeout);
        } catch (const NetError& e) {
            throw DialError(e.code() == ECONNREFUSED ? DialError::Kind::refused : DialError::Kind::other, e.what());
        }
    }

    std::atomic<int> attempts{0};
    std::optional<DialError::Kind> fail_with;
    std::mutex mu;
    std::map<std::string, Endpoint> routes;
};

/// Connected AF_UNIX stream pair; both ends owned.
inline std::pair<Socket, Socket> socket_pair()
{
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0)
        throw std::runtime_error("socketpair failed");
    return {Socket{fds[0]}, Socket{fds[1]}};
}

/// Reads until EOF or `timeout`.
inline std::string read_all(int fd, Millis timeout = Millis{5000})
{
    std::string out;
    char buf[16 * 1024];
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
        if (left <= Millis::zero() || !wait_readable(fd, left))
            break;
        long n = ::recv(fd, buf, sizeof(buf), 0);
        if (n <= 0)
            break;
        out.append(buf, static_cast<std::size_t>(n));
    }
    return out;
}

/// Reads exactly n bytes or fewer on EOF/timeout.
inline std::string read_n(int fd, std::size_t n, Millis timeout = Millis{5000})
{
    std::string out(n, '\0');
    std::size_t got = 0;
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (got < n) {
        auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
        if (left <= Millis::zero() || !wait_readable(fd, left))
            break;
        long r = ::recv(fd, out.data() + got, n - got, 0);
        if (r <= 0)
            break;
        got += static_cast<std::size_t>(r);
    }
    out.resize(got);
    return out;
}

/// Reads up to and including the blank line ending an HTTP head.
inline std::string read_head(int fd, Millis timeout = Millis{5000})
{
    std::string out;
    while (out.find("\r\n\r\n") == std::string::npos) {
        auto c = read_n(fd, 1, timeout);
        if (c.empty())
            break;
        out += c;
    }
    return out;
}

inline std::string bytes(std::initializer_list<int> list)
{
    std::string s;
    for (int b : list)
        s.push_back(static_cast<char>(b));
    return s;
}

/// Deterministic payload of length n.
inline std::string pattern(std::size_t n, char seed = 'a')
{
    std::string s(n, '\0');
    for (std::size_t i = 0; i < n; ++i)
        s[i] = static_cast<char>(seed + static_cast<char>(i % 23));
    return s;
}

/// One-shot TCP server on 127.0.0.1: for each connection, reads `expect_up` bytes then writes
/// `reply` and closes. Records what it received.
class ScriptedServer {
public:
    ScriptedServer(std::size_t expect_up, std::string reply) : expect_(expect_up), reply_(std::move(reply))
    {
        listener_ = listen_tcp(Ipv4Address{127, 0, 0, 1}, 0);
        port_ = local_endpoint(listener_.fd()).port;
        thread_ = std::thread([this] { run(); });
    }
    ~ScriptedServer()
    {
        stop_ = true;
        shutdown_both(listener_.fd());
        if (thread_.joinable())
            thread_.join();
    }
    std::uint16_t port() const { return port_; }
    std::string received()
    {
        std::lock_guard lock(mu_);
        return received_;
    }
    int connections() const { return connections_.load(); }

private:
    void run()
    {
        while (!stop_) {
            if (!wait_readable(listener_.fd(), Millis{100}))
                continue;
            int fd = ::accept4(listener_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
            if (fd < 0)
                continue;
            Socket s{fd};
            ++connections_;
            auto got = read_n(fd, expect_);
            {
                std::lock_guard lock(mu_);
                received_ += got;
            }
            send_all(fd, reply_);
        }
    }

    std::size_t expect_;
    std::string reply_;
    Socket listener_;
    std::uint16_t port_ = 0;
    std::atomic<bool> stop_{false};
    std::atomic<int> connections_{0};
    std::mutex mu_;
    std::string received_;
    std::thread thread_;
};

/// Minimal HTTP origin: reads one request (head plus Content-Length body), answers with
/// `reply` verbatim and closes. Records the exact request bytes it saw.
class HttpOrigin {
public:
    explicit HttpOrigin(std::string reply) : reply_(std::move(reply))
    {
        listener_ = listen_tcp(Ipv4Address{127, 0, 0, 1}, 0);
        port_ = local_endpoint(listener_.fd()).port;
        thread_ = std::thread([this] { run(); });
    }
    ~HttpOrigin()
    {
        stop_ = true;
        shutdown_both(listener_.fd());
        if (thread_.joinable())
            thread_.join();
    }
    std::uint16_t port() const { return port_; }
    std::string received()
    {
        std::lock_guard lock(mu_);
        return received_;
    }

private:
    void run()
    {
        while (!stop_) {
            if (!wait_readable(listener_.fd(), Millis{100}))
                continue;
            int fd = ::accept4(listener_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
            if (fd < 0)
                continue;
            Socket s{fd};
            auto head = read_head(fd);
            std::size_t body = 0;
            auto lower = head;
            for (auto& c : lower)
                c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            if (auto at = lower.find("content-length:"); at != std::string::npos)
                body = std::stoul(lower.substr(at + 15));
            auto got = head + read_n(fd, body);
            {
                std::lock_guard lock(mu_);
                received_ += got;
            }
            send_all(fd, reply_);
        }
    }

    std::string reply_;
    Socket listener_;
    std::uint16_t port_ = 0;
    std::atomic<bool> stop_{false};
    std::mutex mu_;
    std::string received_;
    std::thread thread_;
};

inline std::string temp_path(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / fmt::format("gateway-test-{}", ::getpid());
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

} // namespace gateway::testing
