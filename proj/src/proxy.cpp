#include "gateway/proxy.hpp"

#include "gateway/http_message.hpp"

#include <cerrno>
#include <fcntl.h>
#include <cstring>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <fmt/format.h>
#include <openssl/crypto.h>
#include <spdlog/spdlog.h>

namespace gateway {

namespace {

using SteadyMs = std::chrono::milliseconds;

std::int64_t steady_now_ms()
{
    return std::chrono::duration_cast<SteadyMs>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

bool constant_time_equal(const std::string& a, const std::string& b)
{
    // Length leaks; contents do not.
    const std::size_t n = std::max(a.size(), b.size());
    std::string pa = a;
    std::string pb = b;
    pa.resize(n, '\0');
    pb.resize(n, '\0');
    const bool same = n == 0 || CRYPTO_memcmp(pa.data(), pb.data(), n) == 0;
    return same && a.size() == b.size();
}

void set_timeouts(int fd, Millis recv_timeout, Millis send_timeout)
{
    auto tv = [](Millis m) {
        timeval t{};
        t.tv_sec = static_cast<time_t>(m.count() / 1000);
        t.tv_usec = static_cast<suseconds_t>((m.count() % 1000) * 1000);
        return t;
    };
    timeval r = tv(recv_timeout);
    timeval s = tv(send_timeout);
    ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &r, sizeof(r));
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &s, sizeof(s));
}

/// Buffered reads for protocol handshakes and HTTP framing.
class Reader {
public:
    enum class Status { ok, eof, timeout, error, malformed, too_large };

    Reader(int fd, Millis timeout) : fd_(fd), timeout_(timeout) {}

    void set_timeout(Millis t) { timeout_ = t; }

    /// Reads through the blank line ending an HTTP head. Bytes past it stay buffered.
    Status read_head(std::string& head, std::size_t max = 64 * 1024)
    {
        std::size_t scanned = 0;
        for (;;) {
            for (; scanned < buf_.size(); ++scanned) {
                auto c = static_cast<unsigned char>(buf_[scanned]);
                if (scanned == 0 && !std::isalpha(c))
                    return Status::malformed;
                if (c < 0x20 && c != '\r' && c != '\n' && c != '\t')
                    return Status::malformed;
                if (c == 0x7f)
                    return Status::malformed;
            }
            auto end = find_head_end();
            if (end != std::string::npos) {
                head = buf_.substr(0, end);
                buf_.erase(0, end);
                return Status::ok;
            }
            if (buf_.size() > max)
                return Status::too_large;
            if (auto s = fill(); s != Status::ok)
                return s;
        }
    }

    Status read_exact(std::size_t n, std::string& out)
    {
        while (buf_.size() < n) {
            if (auto s = fill(); s != Status::ok)
                return s;
        }
        out = buf_.substr(0, n);
        buf_.erase(0, n);
        return Status::ok;
    }

    /// Line including its terminator.
    Status read_line(std::string& out, std::size_t max = 8 * 1024)
    {
        for (;;) {
            if (auto nl = buf_.find('\n'); nl != std::string::npos) {
                out = buf_.substr(0, nl + 1);
                buf_.erase(0, nl + 1);
                return Status::ok;
            }
            if (buf_.size() > max)
                return Status::too_large;
            if (auto s = fill(); s != Status::ok)
                return s;
        }
    }

    /// Whatever is buffered, or one recv() when empty.
    Status read_some(std::string& out, std::size_t max)
    {
        if (buf_.empty()) {
            if (auto s = fill(max); s != Status::ok)
                return s;
        }
        auto n = std::min(max, buf_.size());
        out = buf_.substr(0, n);
        buf_.erase(0, n);
        return Status::ok;
    }

    std::string take()
    {
        std::string out;
        out.swap(buf_);
        return out;
    }

private:
    std::size_t find_head_end() const
    {
        auto crlf = buf_.find("\r\n\r\n");
        auto lf = buf_.find("\n\n");
        std::size_t best = std::string::npos;
        if (crlf != std::string::npos)
            best = crlf + 4;
        if (lf != std::string::npos && (best == std::string::npos || lf + 2 < best))
            best = lf + 2;
        return best;
    }

    Status fill(std::size_t max = 16 * 1024)
    {
        if (!wait_readable(fd_, timeout_))
            return Status::timeout;
        std::string chunk(max, '\0');
        long n;
        do {
            n = ::recv(fd_, chunk.data(), chunk.size(), 0);
        } while (n < 0 && errno == EINTR);
        if (n == 0)
            return Status::eof;
        if (n < 0)
            return errno == EAGAIN || errno == EWOULDBLOCK ? Status::timeout : Status::error;
        buf_.append(chunk.data(), static_cast<std::size_t>(n));
        return Status::ok;
    }

    int fd_;
    Millis timeout_;
    std::string buf_;
};

/// Writes `data`, counting each completed write against the session.
/// False on a write error or a session that was finalized underneath us.
bool write_counted(int fd, std::string_view data, TrafficMeter& meter, const SessionHandle& session, Direction dir)
{
    while (!data.empty()) {
        long n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
        if (n < 0 && errno == EINTR)
            continue;
        if (n <= 0)
            return false;
        try {
            meter.record_transfer(session, dir, static_cast<std::uint64_t>(n));
        } catch (const SessionFinalizedError&) {
            return false;
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
    return true;
}

void send_socks_reply(int fd, std::uint8_t code, Endpoint bound = {})
{
    std::uint8_t reply[10] = {0x05, code, 0x00, 0x01};
    std::uint32_t addr = htonl(bound.address.value());
    std::uint16_t port = htons(bound.port);
    std::memcpy(reply + 4, &addr, 4);
    std::memcpy(reply + 8, &port, 2);
    send_all(fd, std::string_view(reinterpret_cast<const char*>(reply), sizeof(reply)));
}

int http_status_for(Verdict v)
{
    switch (v) {
    case Verdict::deny_quota: return 429;
    case Verdict::deny_auth: return 407;
    case Verdict::deny_filter_domain:
    case Verdict::deny_filter_port: return 403;
    case Verdict::allow: break;
    }
    return 200;
}

std::string_view reason_for(int status)
{
    switch (status) {
    case 400: return "Bad Request";
    case 403: return "Forbidden";
    case 407: return "Proxy Authentication Required";
    case 429: return "Too Many Requests";
    case 502: return "Bad Gateway";
    default: return "Error";
    }
}

void send_status(int fd, int status, std::string_view body)
{
    std::vector<http::Header> extra;
    if (status == 407)
        extra.push_back({"Proxy-Authenticate", "Basic realm=\"gateway\""});
    std::string text(body);
    text += "\n";
    send_all(fd, http::status_response(status, reason_for(status), text, extra));
}

std::uint8_t socks_code_for(DialError::Kind kind)
{
    switch (kind) {
    case DialError::Kind::refused: return 0x05;
    case DialError::Kind::resolve:
    case DialError::Kind::unreachable:
    case DialError::Kind::timeout: return 0x04;
    case DialError::Kind::bind: return 0x03;
    case DialError::Kind::other: break;
    }
    return 0x01;
}

/// Origin-form request head with hop-by-hop headers removed.
std::string rewrite_request(const http::RequestHead& head, const http::AbsoluteUri& uri, bool close)
{
    auto listed = head.tokens("connection");
    std::string out = fmt::format("{} {} {}\r\n", head.method, uri.path_and_query, head.version);
    bool has_host = false;
    for (const auto& h : head.headers) {
        if (http::is_hop_by_hop(h.name))
            continue;
        if (std::find(listed.begin(), listed.end(), to_lower(h.name)) != listed.end())
            continue;
        if (to_lower(h.name) == "host")
            has_host = true;
        out += fmt::format("{}: {}\r\n", h.name, h.value);
    }
    if (!has_host)
        out += fmt::format("Host: {}\r\n", uri.authority);
    if (close)
        out += "Connection: close\r\n";
    else if (head.version == "HTTP/1.0")
        out += "Connection: keep-alive\r\n";
    out += "\r\n";
    return out;
}

using Counted = std::function<bool(std::string_view)>;

bool forward_fixed(Reader& from, std::uint64_t n, const Counted& write)
{
    std::string chunk;
    while (n > 0) {
        if (from.read_some(chunk, static_cast<std::size_t>(std::min<std::uint64_t>(n, 64 * 1024))) !=
            Reader::Status::ok)
            return false;
        if (!write(chunk))
            return false;
        n -= chunk.size();
    }
    return true;
}

bool forward_chunked(Reader& from, const Counted& write)
{
    std::string line;
    for (;;) {
        if (from.read_line(line) != Reader::Status::ok || !write(line))
            return false;
        auto size_text = std::string_view(line).substr(0, line.find_first_of(";\r\n"));
        std::uint64_t size = 0;
        try {
            size = std::stoull(std::string(trim(size_text)), nullptr, 16);
        } catch (const std::exception&) {
            return false;
        }
        if (size == 0) {
            // Trailer section ends with an empty line.
            for (;;) {
                if (from.read_line(line) != Reader::Status::ok || !write(line))
                    return false;
                if (line == "\r\n" || line == "\n")
                    return true;
            }
        }
        if (!forward_fixed(from, size, write))
            return false;
        if (from.read_line(line) != Reader::Status::ok || !write(line))
            return false;
    }
}

/// False when the framing could not be completed.
bool forward_body(Reader& from, const http::BodyFraming& framing, const Counted& write)
{
    switch (framing.kind) {
    case http::BodyKind::none: return true;
    case http::BodyKind::fixed: return forward_fixed(from, framing.length, write);
    case http::BodyKind::chunked: return forward_chunked(from, write);
    case http::BodyKind::until_close: {
        std::string chunk;
        for (;;) {
            auto s = from.read_some(chunk, 64 * 1024);
            if (s == Reader::Status::eof)
                return true;
            if (s != Reader::Status::ok || !write(chunk))
                return false;
        }
    }
    }
    return false;
}

} // namespace

bool authenticate(const std::optional<Credentials>& presented, const std::optional<Credentials>& configured)
{
    if (!configured)
        return true;
    if (!presented)
        return false;
    // Evaluate both comparisons unconditionally.
    const bool user_ok = constant_time_equal(presented->username, configured->username);
    const bool pass_ok = constant_time_equal(presented->password, configured->password);
    return user_ok & pass_ok;
}

Ipv4Address resolve_ipv4(const std::string& host)
{
    if (auto literal = Ipv4Address::parse(host))
        return *literal;
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    int rc = ::getaddrinfo(host.c_str(), nullptr, &hints, &res);
    if (rc != 0 || !res)
        throw DialError(DialError::Kind::resolve, fmt::format("resolve {}: {}", host, ::gai_strerror(rc)));
    auto* sa = reinterpret_cast<sockaddr_in*>(res->ai_addr);
    Ipv4Address out{ntohl(sa->sin_addr.s_addr)};
    ::freeaddrinfo(res);
    return out;
}

void EgressDialer::set_binding(EgressBinding binding)
{
    std::lock_guard lock(mu_);
    binding_ = std::move(binding);
}

EgressBinding EgressDialer::binding() const
{
    std::lock_guard lock(mu_);
    return binding_;
}

Socket EgressDialer::dial(const TargetAddress& target, Millis timeout)
{
    auto binding = this->binding();
    auto address = resolve_ipv4(target.host);

    std::optional<Ipv4Address> local = binding.address;
    if (binding.interface) {
        std::vector<InterfaceInfo> table;
        try {
            table = list_interfaces();
        } catch (const NetError& e) {
            throw DialError(DialError::Kind::bind, e.what());
        }
        auto it = std::find_if(table.begin(), table.end(), [&](const InterfaceInfo& i) {
            return i.name == *binding.interface && i.up && !i.addresses.empty();
        });
        if (it == table.end())
            throw DialError(DialError::Kind::bind, fmt::format("egress interface {} unavailable", *binding.interface));
        local = it->addresses.front();
    }

    try {
        return connect_tcp({address, target.port}, local, timeout);
    } catch (const NetError& e) {
        auto kind = DialError::Kind::other;
        switch (e.code()) {
        case ECONNREFUSED: kind = DialError::Kind::refused; break;
        case ETIMEDOUT: kind = DialError::Kind::timeout; break;
        case ENETUNREACH:
        case EHOSTUNREACH: kind = DialError::Kind::unreachable; break;
        case EADDRNOTAVAIL:
        case EADDRINUSE: kind = DialError::Kind::bind; break;
        default: break;
        }
        throw DialError(kind, e.what());
    }
}

SessionRecord relay(int client_fd, int upstream_fd, const SessionHandle& session, TrafficMeter& meter,
                    const RelayOptions& options, std::string_view pending_up)
{
    const Millis idle = options.idle_timeout;
    const Millis poll_step = std::min(idle, Millis{1000});
    set_timeouts(client_fd, poll_step, idle);
    set_timeouts(upstream_fd, poll_step, idle);

    std::atomic<std::int64_t> last_activity{steady_now_ms()};
    std::atomic<bool> abort{false};

    auto stop_all = [&] {
        abort.store(true);
        shutdown_both(client_fd);
        shutdown_both(upstream_fd);
    };

    // Returns false when the caller should stop the whole relay.
    auto on_idle_tick = [&] { return steady_now_ms() - last_activity.load() < idle.count(); };

    auto copy_pump = [&](int from, int to, Direction dir) {
        std::vector<char> buf(options.buffer_size);
        for (;;) {
            if (abort.load() || session->terminated())
                return;
            long n = ::recv(from, buf.data(), buf.size(), 0);
            if (n > 0) {
                last_activity.store(steady_now_ms());
                if (!write_counted(to, std::string_view(buf.data(), static_cast<std::size_t>(n)), meter, session,
                                   dir)) {
                    stop_all();
                    return;
                }
                last_activity.store(steady_now_ms());
                continue;
            }
            if (n == 0) {
                shutdown_write(to);
                return;
            }
            if (errno == EINTR)
                continue;
            if ((errno == EAGAIN || errno == EWOULDBLOCK) && on_idle_tick())
                continue;
            stop_all();
            return;
        }
    };

    // socket -> pipe -> socket; counts what leaves the pipe.
    auto splice_pump = [&](int from, int to, Direction dir, int pipe_r, int pipe_w) {
        for (;;) {
            if (abort.load() || session->terminated())
                return;
            long n = ::splice(from, nullptr, pipe_w, nullptr, options.buffer_size, SPLICE_F_MOVE);
            if (n > 0) {
                last_activity.store(steady_now_ms());
                long pending = n;
                while (pending > 0) {
                    long m = ::splice(pipe_r, nullptr, to, nullptr, static_cast<std::size_t>(pending),
                                      SPLICE_F_MOVE);
                    if (m < 0 && errno == EINTR)
                        continue;
                    if (m <= 0) {
                        stop_all();
                        return;
                    }
                    try {
                        meter.record_transfer(session, dir, static_cast<std::uint64_t>(m));
                    } catch (const SessionFinalizedError&) {
                        stop_all();
                        return;
                    }
                    pending -= m;
                }
                last_activity.store(steady_now_ms());
                continue;
            }
            if (n == 0) {
                shutdown_write(to);
                return;
            }
            if (errno == EINTR)
                continue;
            if ((errno == EAGAIN || errno == EWOULDBLOCK) && on_idle_tick())
                continue;
            stop_all();
            return;
        }
    };

    auto pump = [&](int from, int to, Direction dir) {
        int p[2] = {-1, -1};
        if (options.zero_copy && ::pipe2(p, O_CLOEXEC) == 0) {
            ::fcntl(p[1], F_SETPIPE_SZ, static_cast<int>(options.buffer_size));
            splice_pump(from, to, dir, p[0], p[1]);
            ::close(p[0]);
            ::close(p[1]);
            return;
        }
        copy_pump(from, to, dir);
    };

    bool ok = true;
    if (!pending_up.empty()) {
        ok = write_counted(upstream_fd, pending_up, meter, session, Direction::up);
        if (!ok)
            stop_all();
    }
    if (ok) {
        std::thread down([&] { pump(upstream_fd, client_fd, Direction::down); });
        pump(client_fd, upstream_fd, Direction::up);
        down.join();
    }
    return meter.finalize_session(session);
}

struct ProxyServer::Connection {
    std::uint64_t id = 0;
    std::mutex mu;
    std::vector<int> fds;
    bool closed = false;

    void add(int fd)
    {
        std::lock_guard lock(mu);
        fds.push_back(fd);
        if (closed)
            shutdown_both(fd);
    }
    void remove(int fd)
    {
        std::lock_guard lock(mu);
        std::erase(fds, fd);
    }
    void shutdown_all()
    {
        std::lock_guard lock(mu);
        closed = true;
        for (int fd : fds)
            shutdown_both(fd);
    }
};

namespace {

/// Keeps an fd visible to stop()/terminate() while its Socket is alive. Declare after the Socket.
class FdRegistration {
public:
    FdRegistration(std::shared_ptr<ProxyServer::Connection> conn, int fd) : conn_(std::move(conn)), fd_(fd)
    {
        conn_->add(fd_);
    }
    ~FdRegistration() { conn_->remove(fd_); }
    FdRegistration(const FdRegistration&) = delete;
    FdRegistration& operator=(const FdRegistration&) = delete;

private:
    std::shared_ptr<ProxyServer::Connection> conn_;
    int fd_;
};

} // namespace

ProxyServer::ProxyServer(ProxySettings settings, TrafficMeter& meter, TrafficManager& manager, Dialer& dialer,
                         const Clock& clock)
    : settings_(std::move(settings)), meter_(meter), manager_(manager), dialer_(dialer), clock_(clock)
{
}

ProxyServer::~ProxyServer()
{
    stop(Millis{0});
}

void ProxyServer::start(Ipv4Address listen_address, std::uint16_t http_port, std::uint16_t socks_port)
{
    http_listener_ = listen_tcp(listen_address, http_port);
    socks_listener_ = listen_tcp(listen_address, socks_port);
    http_port_ = local_endpoint(http_listener_.fd()).port;
    socks_port_ = local_endpoint(socks_listener_.fd()).port;
    wake_fd_ = ::eventfd(0, EFD_CLOEXEC);
    stopping_ = false;
    http_thread_ = std::thread([this] { accept_loop(http_listener_.fd(), Kind::http); });
    socks_thread_ = std::thread([this] { accept_loop(socks_listener_.fd(), Kind::socks); });
    spdlog::info("proxy listening on {} (http {}, socks5 {})", listen_address.to_string(), http_port_, socks_port_);
}

void ProxyServer::stop(Millis drain)
{
    if (stopping_.exchange(true))
        return;
    if (wake_fd_ >= 0) {
        std::uint64_t one = 1;
        [[maybe_unused]] auto n = ::write(wake_fd_, &one, sizeof(one));
    }
    if (http_thread_.joinable())
        http_thread_.join();
    if (socks_thread_.joinable())
        socks_thread_.join();
    http_listener_.close();
    socks_listener_.close();
    if (wake_fd_ >= 0) {
        ::close(wake_fd_);
        wake_fd_ = -1;
    }

    std::unique_lock lock(conn_mu_);
    conn_cv_.wait_for(lock, drain, [this] { return connections_.empty(); });
    for (auto& [id, conn] : connections_)
        conn->shutdown_all();
    auto threads = std::move(threads_);
    threads_.clear();
    finished_.clear();
    lock.unlock();
    for (auto& [id, t] : threads) {
        if (t.joinable())
            t.join();
    }
}

std::size_t ProxyServer::active_connections() const
{
    std::lock_guard lock(conn_mu_);
    return connections_.size();
}

std::shared_ptr<ProxyServer::Connection> ProxyServer::track()
{
    auto conn = std::make_shared<Connection>();
    std::lock_guard lock(conn_mu_);
    conn->id = next_conn_id_++;
    connections_[conn->id] = conn;
    if (stopping_)
        conn->closed = true;
    return conn;
}

void ProxyServer::untrack(std::uint64_t id)
{
    {
        std::lock_guard lock(conn_mu_);
        connections_.erase(id);
    }
    conn_cv_.notify_all();
}

void ProxyServer::reap_finished()
{
    std::vector<std::thread> done;
    {
        std::lock_guard lock(conn_mu_);
        for (auto id : finished_) {
            if (auto it = threads_.find(id); it != threads_.end()) {
                done.push_back(std::move(it->second));
                threads_.erase(it);
            }
        }
        finished_.clear();
    }
    for (auto& t : done)
        t.join();
}

void ProxyServer::accept_loop(int listen_fd, Kind kind)
{
    for (;;) {
        pollfd pfds[2] = {{listen_fd, POLLIN, 0}, {wake_fd_, POLLIN, 0}};
        int n = ::poll(pfds, 2, 1000);
        if (stopping_)
            return;
        reap_finished();
        if (n <= 0 || !(pfds[0].revents & POLLIN))
            continue;
        sockaddr_in sa{};
        socklen_t len = sizeof(sa);
        int fd = ::accept4(listen_fd, reinterpret_cast<sockaddr*>(&sa), &len, SOCK_CLOEXEC);
        if (fd < 0) {
            if (errno == EMFILE || errno == ENFILE)
                std::this_thread::sleep_for(Millis{50});
            continue;
        }
        set_nodelay(fd);
        Ipv4Address ip{ntohl(sa.sin_addr.s_addr)};

        std::lock_guard lock(conn_mu_);
        const auto id = next_conn_id_++;
        threads_[id] = std::thread([this, fd, ip, kind, id] {
            try {
                if (kind == Kind::http)
                    handle_http(Socket{fd}, ip);
                else
                    handle_socks5(Socket{fd}, ip);
            } catch (const std::exception& e) {
                spdlog::warn("connection from {} failed: {}", ip.to_string(), e.what());
            }
            {
                std::lock_guard inner(conn_mu_);
                finished_.push_back(id);
            }
        });
    }
}

SessionHandle ProxyServer::record_denied(Ipv4Address ip, ProxyProtocol protocol, std::optional<TargetAddress> target,
                                         AdmissionDecision verdict)
{
    spdlog::info("denied {} {} -> {}: {}", to_string(protocol), ip.to_string(),
                 target ? target->to_string() : std::string("-"), verdict.detail);
    return meter_.open_session(ip, protocol, std::move(target), std::move(verdict));
}

std::optional<SessionRecord> ProxyServer::handle_http(Socket client, Ipv4Address client_ip)
{
    auto conn = track();
    struct Untrack {
        ProxyServer* self;
        std::uint64_t id;
        ~Untrack() { self->untrack(id); }
    } untrack_guard{this, conn->id};
    FdRegistration client_reg(conn, client.fd());

    if (!meter_.accepts(client_ip)) {
        send_status(client.fd(), 403, "client address not permitted");
        return std::nullopt;
    }

    Reader reader(client.fd(), settings_.handshake_timeout);
    std::string head_text;
    auto status = reader.read_head(head_text);
    if (status == Reader::Status::malformed || status == Reader::Status::too_large) {
        send_status(client.fd(), 400, "malformed request");
        return std::nullopt;
    }
    if (status != Reader::Status::ok)
        return std::nullopt;
    auto head = http::parse_request_head(head_text);
    if (!head) {
        send_status(client.fd(), 400, "malformed request");
        return std::nullopt;
    }

    const bool is_connect = head->method == "CONNECT";
    if (settings_.auth) {
        std::optional<Credentials> presented;
        if (auto h = head->header("proxy-authorization"))
            presented = http::parse_basic_credentials(*h);
        if (!authenticate(presented, settings_.auth)) {
            send_status(client.fd(), 407, "proxy authentication required");
            if (!presented)
                return std::nullopt; // challenge, not a failed attempt
            std::optional<TargetAddress> target =
                is_connect ? http::parse_authority(head->target) : std::nullopt;
            if (!is_connect) {
                if (auto uri = http::parse_absolute_uri(head->target))
                    target = TargetAddress{uri->host, uri->port};
            }
            auto s = record_denied(client_ip, is_connect ? ProxyProtocol::http_connect : ProxyProtocol::http_forward,
                                   target, AdmissionDecision::deny(Verdict::deny_auth, "invalid proxy credentials"));
            return meter_.finalize_session(s);
        }
    }

    if (is_connect)
        return http_connect(client, client_ip, head->target, reader.take(), conn);
    return http_forward(client, client_ip, std::move(head_text), reader, conn);
}

std::optional<SessionRecord> ProxyServer::http_connect(Socket& client, Ipv4Address ip, const std::string& authority,
                                                       std::string leftover, const std::shared_ptr<Connection>& conn)
{
    auto target = http::parse_authority(authority);
    if (!target) {
        send_status(client.fd(), 400, "CONNECT target must be host:port");
        return std::nullopt;
    }
    auto verdict = manager_.check_admission(ip, *target, clock_.now());
    if (!verdict.allowed()) {
        send_status(client.fd(), http_status_for(verdict.verdict), verdict.detail);
        return meter_.finalize_session(record_denied(ip, ProxyProtocol::http_connect, target, verdict));
    }

    auto session = meter_.open_session(ip, ProxyProtocol::http_connect, target, verdict);
    session->set_terminator([conn] { conn->shutdown_all(); });
    Socket upstream;
    try {
        upstream = dialer_.dial(*target, settings_.connect_timeout);
    } catch (const DialError& e) {
        spdlog::info("CONNECT {} for {} failed: {}", target->to_string(), ip.to_string(), e.what());
        send_status(client.fd(), 502, e.what());
        return meter_.finalize_session(session);
    }
    FdRegistration upstream_reg(conn, upstream.fd());
    if (!send_all(client.fd(), std::string_view("HTTP/1.1 200 Connection Established\r\n\r\n")))
        return meter_.finalize_session(session);
    return relay(client.fd(), upstream.fd(), session, meter_,
                 RelayOptions{settings_.idle_timeout, settings_.relay_buffer}, leftover);
}

template <class ClientReader>
std::optional<SessionRecord> ProxyServer::http_forward(Socket& client, Ipv4Address ip, std::string first_head,
                                                       ClientReader& client_reader,
                                                       const std::shared_ptr<Connection>& conn)
{
    client_reader.set_timeout(settings_.idle_timeout);

    SessionHandle session;
    Socket upstream;
    std::unique_ptr<FdRegistration> upstream_reg;
    std::unique_ptr<Reader> upstream_reader;
    std::optional<TargetAddress> upstream_target;

    auto finish = [&]() -> std::optional<SessionRecord> {
        if (!session)
            return std::nullopt;
        return meter_.finalize_session(session);
    };
    auto fail = [&](int status, std::string_view body) {
        send_status(client.fd(), status, body);
        return finish();
    };

    std::string head_text = std::move(first_head);
    for (bool first = true;; first = false) {
        if (!first) {
            auto s = client_reader.read_head(head_text);
            if (s == Reader::Status::malformed || s == Reader::Status::too_large)
                return fail(400, "malformed request");
            if (s != Reader::Status::ok)
                return finish();
        }

        auto head = http::parse_request_head(head_text);
        if (!head)
            return fail(400, "malformed request");
        if (head->method == "CONNECT")
            return fail(400, "CONNECT on a forwarding connection");
        if (!first && settings_.auth) {
            std::optional<Credentials> presented;
            if (auto h = head->header("proxy-authorization"))
                presented = http::parse_basic_credentials(*h);
            if (!authenticate(presented, settings_.auth))
                return fail(407, "proxy authentication required");
        }
        auto uri = http::parse_absolute_uri(head->target);
        if (!uri || uri->scheme != "http")
            return fail(400, "absolute http:// URI required");
        auto request_framing = http::request_body(*head);
        if (!request_framing)
            return fail(400, "invalid message framing");
        TargetAddress target{uri->host, uri->port};

        auto verdict = manager_.check_admission(ip, target, clock_.now());
        if (!verdict.allowed()) {
            send_status(client.fd(), http_status_for(verdict.verdict), verdict.detail);
            if (!session)
                return meter_.finalize_session(record_denied(ip, ProxyProtocol::http_forward, target, verdict));
            return finish();
        }
        if (!session) {
            session = meter_.open_session(ip, ProxyProtocol::http_forward, target, verdict);
            session->set_terminator([conn] { conn->shutdown_all(); });
        }

        if (!upstream || upstream_target != target) {
            upstream_reader.reset();
            upstream_reg.reset();
            upstream.close();
            try {
                upstream = dialer_.dial(target, settings_.connect_timeout);
            } catch (const DialError& e) {
                spdlog::info("forward {} for {} failed: {}", target.to_string(), ip.to_string(), e.what());
                return fail(502, e.what());
            }
            upstream_reg = std::make_unique<FdRegistration>(conn, upstream.fd());
            upstream_reader = std::make_unique<Reader>(upstream.fd(), settings_.idle_timeout);
            upstream_target = target;
        }

        const bool client_close = http::request_wants_close(*head);
        Counted up = [&](std::string_view d) { return write_counted(upstream.fd(), d, meter_, session, Direction::up); };
        Counted down = [&](std::string_view d) {
            return write_counted(client.fd(), d, meter_, session, Direction::down);
        };

        if (!up(rewrite_request(*head, *uri, client_close)) || !forward_body(client_reader, *request_framing, up))
            return fail(502, "upstream write failed");

        // Interim 1xx responses are relayed until the final one.
        std::optional<http::ResponseHead> response;
        bool wrote_any = false;
        for (;;) {
            std::string response_text;
            if (upstream_reader->read_head(response_text) != Reader::Status::ok ||
                !(response = http::parse_response_head(response_text))) {
                if (wrote_any)
                    return finish();
                return fail(502, "invalid or missing upstream response");
            }
            if (!down(response_text))
                return finish();
            wrote_any = true;
            if (response->status >= 200 || response->status == 101)
                break;
        }
        if (response->status == 101)
            return finish(); // protocol switches are not tunnelled over forward mode
        auto response_framing = http::response_body(*response, head->method);
        if (!response_framing || !forward_body(*upstream_reader, *response_framing, down))
            return finish();

        if (client_close || http::response_wants_close(*response) ||
            response_framing->kind == http::BodyKind::until_close)
            return finish();
    }
}

std::optional<SessionRecord> ProxyServer::handle_socks5(Socket client, Ipv4Address client_ip)
{
    auto conn = track();
    struct Untrack {
        ProxyServer* self;
        std::uint64_t id;
        ~Untrack() { self->untrack(id); }
    } untrack_guard{this, conn->id};
    FdRegistration client_reg(conn, client.fd());
    const int fd = client.fd();

    Reader reader(fd, settings_.handshake_timeout);
    std::string bytes;
    if (reader.read_exact(2, bytes) != Reader::Status::ok || bytes[0] != 0x05)
        return std::nullopt; // not SOCKS5: close without a reply
    const auto nmethods = static_cast<unsigned char>(bytes[1]);
    std::string methods;
    if (nmethods == 0 || reader.read_exact(nmethods, methods) != Reader::Status::ok)
        return std::nullopt;

    const char wanted = settings_.auth ? 0x02 : 0x00;
    if (!meter_.accepts(client_ip) || methods.find(wanted) == std::string::npos) {
        send_all(fd, std::string_view("\x05\xff", 2));
        return std::nullopt;
    }
    const char choice[2] = {0x05, wanted};
    if (!send_all(fd, std::string_view(choice, 2)))
        return std::nullopt;

    if (settings_.auth) {
        // Username/password subnegotiation: VER ULEN UNAME PLEN PASSWD.
        std::string hdr;
        std::string user;
        std::string plen;
        std::string pass;
        if (reader.read_exact(2, hdr) != Reader::Status::ok)
            return std::nullopt;
        if (hdr[0] != 0x01) {
            send_all(fd, std::string_view("\x01\x01", 2));
            return std::nullopt;
        }
        if (reader.read_exact(static_cast<unsigned char>(hdr[1]), user) != Reader::Status::ok ||
            reader.read_exact(1, plen) != Reader::Status::ok ||
            reader.read_exact(static_cast<unsigned char>(plen[0]), pass) != Reader::Status::ok)
            return std::nullopt;
        if (!authenticate(Credentials{user, pass}, settings_.auth)) {
            send_all(fd, std::string_view("\x01\x01", 2));
            auto s = record_denied(client_ip, ProxyProtocol::socks5, std::nullopt,
                                   AdmissionDecision::deny(Verdict::deny_auth, "invalid SOCKS5 credentials"));
            return meter_.finalize_session(s);
        }
        send_all(fd, std::string_view("\x01\x00", 2));
    }

    // Request: VER CMD RSV ATYP DST.ADDR DST.PORT
    std::string req;
    if (reader.read_exact(4, req) != Reader::Status::ok || req[0] != 0x05)
        return std::nullopt;
    if (req[1] != 0x01) {
        send_socks_reply(fd, 0x07);
        return std::nullopt;
    }
    std::string host;
    std::string raw;
    switch (static_cast<unsigned char>(req[3])) {
    case 0x01:
        if (reader.read_exact(4, raw) != Reader::Status::ok)
            return std::nullopt;
        host = fmt::format("{}.{}.{}.{}", static_cast<unsigned char>(raw[0]), static_cast<unsigned char>(raw[1]),
                           static_cast<unsigned char>(raw[2]), static_cast<unsigned char>(raw[3]));
        break;
    case 0x03: {
        std::string len;
        if (reader.read_exact(1, len) != Reader::Status::ok ||
            reader.read_exact(static_cast<unsigned char>(len[0]), host) != Reader::Status::ok)
            return std::nullopt;
        break;
    }
    default:
        send_socks_reply(fd, 0x08); // IPv6 and unknown address types
        return std::nullopt;
    }
    std::string port_bytes;
    if (reader.read_exact(2, port_bytes) != Reader::Status::ok)
        return std::nullopt;
    const std::uint32_t port = (static_cast<unsigned char>(port_bytes[0]) << 8) | static_cast<unsigned char>(port_bytes[1]);
    auto target = TargetAddress::make(host, port);
    if (!target) {
        send_socks_reply(fd, 0x01);
        return std::nullopt;
    }

    auto verdict = manager_.check_admission(client_ip, *target, clock_.now());
    if (!verdict.allowed()) {
        send_socks_reply(fd, 0x02);
        return meter_.finalize_session(record_denied(client_ip, ProxyProtocol::socks5, target, verdict));
    }

    auto session = meter_.open_session(client_ip, ProxyProtocol::socks5, target, verdict);
    session->set_terminator([conn] { conn->shutdown_all(); });
    Socket upstream;
    try {
        upstream = dialer_.dial(*target, settings_.connect_timeout);
    } catch (const DialError& e) {
        spdlog::info("SOCKS5 {} for {} failed: {}", target->to_string(), client_ip.to_string(), e.what());
        send_socks_reply(fd, socks_code_for(e.kind()));
        return meter_.finalize_session(session);
    }
    FdRegistration upstream_reg(conn, upstream.fd());
    send_socks_reply(fd, 0x00, local_endpoint(upstream.fd()));
    return relay(fd, upstream.fd(), session, meter_, RelayOptions{settings_.idle_timeout, settings_.relay_buffer},
                 reader.take());
}

} // namespace gateway
