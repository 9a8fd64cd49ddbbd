#include "gateway/harness.hpp"

#include "gateway/http_message.hpp"

#include <barrier>
#include <cmath>
#include <cstring>
#include <numeric>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace gateway {

namespace {

using Steady = std::chrono::steady_clock;

constexpr int kLinkBufferBytes = 64 * 1024;

double seconds_between(Steady::time_point a, Steady::time_point b)
{
    return std::chrono::duration<double>(b - a).count();
}

int remaining_ms(Steady::time_point deadline)
{
    auto left = std::chrono::duration_cast<Millis>(deadline - Steady::now()).count();
    return static_cast<int>(std::max<std::int64_t>(0, left));
}

void set_send_timeout(int fd, Millis t)
{
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(t.count() / 1000);
    tv.tv_usec = static_cast<suseconds_t>((t.count() % 1000) * 1000);
    ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
}

/// Caps kernel buffering so queued bytes do not outlast the sender by seconds on a slow link.
void set_buffers(int fd, int bytes)
{
    ::setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &bytes, sizeof(bytes));
    ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &bytes, sizeof(bytes));
}

/// Reads until EOF or `timeout` of silence; returns the bytes seen.
std::uint64_t drain(int fd, Millis timeout)
{
    std::vector<std::byte> buf(64 * 1024);
    std::uint64_t total = 0;
    while (wait_readable(fd, timeout)) {
        long n = recv_some(fd, buf);
        if (n <= 0)
            break;
        total += static_cast<std::uint64_t>(n);
    }
    return total;
}

/// Runs `fn` on its own thread per connection; joins them on stop.
template <class Fn>
void accept_connections(int listen_fd, std::atomic<bool>& stopping, std::mutex& mu, std::vector<std::thread>& workers,
                        std::vector<int>& open_fds, Fn fn)
{
    while (!stopping) {
        if (!wait_readable(listen_fd, Millis{100}))
            continue;
        int fd = ::accept4(listen_fd, nullptr, nullptr, SOCK_CLOEXEC);
        if (fd < 0)
            continue;
        std::lock_guard lock(mu);
        if (stopping) {
            ::close(fd);
            return;
        }
        open_fds.push_back(fd);
        workers.emplace_back([fd, fn, &mu, &open_fds] {
            Socket owned{fd};
            fn(fd);
            std::lock_guard inner(mu);
            std::erase(open_fds, fd); // before `owned` closes, so stop() never touches a reused fd
        });
    }
}

void stop_workers(std::atomic<bool>& stopping, std::thread& acceptor, std::mutex& mu,
                  std::vector<std::thread>& workers, std::vector<int>& open_fds)
{
    if (stopping.exchange(true))
        return;
    if (acceptor.joinable())
        acceptor.join();
    std::vector<std::thread> joinable;
    {
        std::lock_guard lock(mu);
        for (int fd : open_fds)
            shutdown_both(fd);
        joinable = std::move(workers);
        workers.clear();
    }
    for (auto& t : joinable)
        t.join();
}

} // namespace

std::optional<double> compute_jfi(std::span<const double> values)
{
    if (values.empty())
        return std::nullopt;
    double sum = 0;
    double sum_sq = 0;
    for (double v : values) {
        if (v < 0 || std::isnan(v))
            throw std::invalid_argument("compute_jfi: values must be non-negative");
        sum += v;
        sum_sq += v * v;
    }
    if (sum_sq == 0)
        return std::nullopt;
    if (values.size() == 1)
        return 1.0;
    return (sum * sum) / (static_cast<double>(values.size()) * sum_sq);
}

MeanStd mean_stddev(std::span<const double> values)
{
    MeanStd out;
    if (values.empty())
        return out;
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() > 1) {
        double acc = 0;
        for (double v : values)
            acc += (v - out.mean) * (v - out.mean);
        out.stddev = std::sqrt(acc / static_cast<double>(values.size() - 1));
    }
    return out;
}

SharedLinkBudget::SharedLinkBudget(double bits_per_second, Millis burst)
    : rate_bytes_(bits_per_second / 8.0), burst_(std::chrono::duration_cast<std::chrono::nanoseconds>(burst))
{
    if (!(bits_per_second > 0))
        throw std::invalid_argument("link rate must be positive");
}

void SharedLinkBudget::acquire(std::size_t bytes)
{
    if (bytes == 0)
        return;
    const auto cost = std::chrono::nanoseconds(static_cast<std::int64_t>(static_cast<double>(bytes) / rate_bytes_ * 1e9));
    SteadyTime done;
    {
        std::lock_guard lock(mu_);
        const auto now = std::chrono::steady_clock::now();
        const auto start = std::max(now - burst_, next_free_);
        next_free_ = start + cost;
        done = next_free_;
    }
    consumed_ += bytes;
    std::this_thread::sleep_until(done);
}

RateLimitedLink::RateLimitedLink(double bits_per_second, Endpoint upstream, std::size_t chunk)
    : budget_(bits_per_second), upstream_(upstream), chunk_(chunk)
{
    listener_ = listen_tcp(Ipv4Address{127, 0, 0, 1}, 0);
    port_ = local_endpoint(listener_.fd()).port;
    acceptor_ = std::thread([this] { accept_loop(); });
}

RateLimitedLink::~RateLimitedLink()
{
    stop();
}

void RateLimitedLink::stop()
{
    stop_workers(stopping_, acceptor_, mu_, workers_, open_fds_);
}

void RateLimitedLink::accept_loop()
{
    accept_connections(listener_.fd(), stopping_, mu_, workers_, open_fds_, [this](int fd) { serve(fd); });
}

void RateLimitedLink::serve(int client_fd)
{
    const auto peer = peer_endpoint(client_fd);
    Socket upstream;
    try {
        upstream = connect_tcp(upstream_, peer.address.is_loopback() ? std::optional(peer.address) : std::nullopt);
    } catch (const NetError& e) {
        spdlog::debug("link shim: upstream connect failed: {}", e.what());
        return;
    }
    {
        std::lock_guard lock(mu_);
        open_fds_.push_back(upstream.fd());
        if (stopping_)
            shutdown_both(upstream.fd());
    }
    set_nodelay(client_fd);
    set_buffers(client_fd, kLinkBufferBytes);
    set_buffers(upstream.fd(), kLinkBufferBytes);

    auto pump = [this](int from, int to) {
        std::vector<std::byte> buf(chunk_);
        for (;;) {
            long n = recv_some(from, buf);
            if (n <= 0) {
                if (n == 0)
                    shutdown_write(to);
                else {
                    shutdown_both(from);
                    shutdown_both(to);
                }
                return;
            }
            budget_.acquire(static_cast<std::size_t>(n));
            if (!send_all(to, std::span(buf.data(), static_cast<std::size_t>(n)))) {
                shutdown_both(from);
                shutdown_both(to);
                return;
            }
        }
    };
    std::thread down([&] { pump(upstream.fd(), client_fd); });
    pump(client_fd, upstream.fd());
    down.join();

    std::lock_guard lock(mu_);
    std::erase(open_fds_, upstream.fd());
}

TestOrigin::TestOrigin()
{
    listener_ = listen_tcp(Ipv4Address{127, 0, 0, 1}, 0);
    port_ = local_endpoint(listener_.fd()).port;
    acceptor_ = std::thread([this] { accept_loop(); });
}

TestOrigin::~TestOrigin()
{
    stop();
}

void TestOrigin::stop()
{
    stop_workers(stopping_, acceptor_, mu_, workers_, open_fds_);
}

void TestOrigin::accept_loop()
{
    accept_connections(listener_.fd(), stopping_, mu_, workers_, open_fds_, [this](int fd) { serve(fd); });
}

void TestOrigin::serve(int fd)
{
    ++served_;
    set_nodelay(fd);
    char mode = 0;
    if (!wait_readable(fd, Millis{30'000}) || ::recv(fd, &mode, 1, 0) != 1)
        return;

    switch (mode) {
    case 'D': {
        set_buffers(fd, kLinkBufferBytes);
        std::string pattern(64 * 1024, '\0');
        for (std::size_t i = 0; i < pattern.size(); ++i)
            pattern[i] = static_cast<char>('a' + i % 26);
        for (;;) {
            char c = 0;
            long r = ::recv(fd, &c, 1, MSG_DONTWAIT);
            if (r == 0 || (r == 1 && c == 'S') || (r < 0 && errno != EAGAIN && errno != EWOULDBLOCK))
                break;
            if (!send_all(fd, pattern))
                return;
        }
        shutdown_write(fd);
        drain(fd, Millis{5000});
        break;
    }
    case 'U': {
        std::uint64_t total = drain(fd, Millis{30'000});
        std::uint64_t be = 0;
        for (int i = 0; i < 8; ++i)
            be |= ((total >> (8 * (7 - i))) & 0xff) << (8 * i);
        send_all(fd, std::string_view(reinterpret_cast<const char*>(&be), 8));
        shutdown_write(fd);
        drain(fd, Millis{5000});
        break;
    }
    case 'P': {
        std::vector<std::byte> buf(256);
        for (;;) {
            if (!wait_readable(fd, Millis{60'000}))
                return;
            long n = recv_some(fd, buf);
            if (n <= 0 || !send_all(fd, std::span(buf.data(), static_cast<std::size_t>(n))))
                return;
        }
    }
    default: break;
    }
}

std::string LoadTestPlan::validation_error() const
{
    if (client_count < 1 || client_count > 16)
        return "client_count: must be between 1 and 16";
    if (duration_down.count() <= 0 || duration_up.count() <= 0)
        return "duration: must be positive";
    if (repetitions < 1)
        return "repetitions: must be at least 1";
    if (link_rate_limit && !(*link_rate_limit > 0))
        return "link_rate_limit: must be positive";
    if (protocol == ProxyProtocol::http_forward)
        return "protocol: http_forward cannot carry the raw load-test stream; use http_connect or socks5";
    if (first_source_octet < 2 || first_source_octet + client_count > 255)
        return "first_source_octet: client addresses must stay inside 127.0.0.2-254";
    return {};
}

Socket open_tunnel(const Endpoint& connect_to, ProxyProtocol protocol, const Endpoint& target,
                   std::optional<Ipv4Address> source, const std::optional<Credentials>& credentials, Millis timeout)
{
    Socket s;
    try {
        s = connect_tcp(connect_to, source, timeout);
    } catch (const NetError& e) {
        throw LoadTestError(fmt::format("connect to proxy {}: {}", connect_to.to_string(), e.what()));
    }
    const int fd = s.fd();

    if (protocol == ProxyProtocol::http_connect) {
        std::string req = fmt::format("CONNECT {0} HTTP/1.1\r\nHost: {0}\r\n", target.to_string());
        if (credentials)
            req += fmt::format("Proxy-Authorization: {}\r\n", http::basic_credentials_header(*credentials));
        req += "\r\n";
        if (!send_all(fd, req))
            throw LoadTestError("CONNECT: write failed");
        // Read byte by byte so no tunnel payload is consumed with the head.
        std::string head;
        while (head.find("\r\n\r\n") == std::string::npos) {
            char c;
            if (!wait_readable(fd, timeout) || ::recv(fd, &c, 1, 0) != 1)
                throw LoadTestError("CONNECT: no response from proxy");
            head += c;
            if (head.size() > 16 * 1024)
                throw LoadTestError("CONNECT: oversized response");
        }
        if (head.rfind("HTTP/1.1 200", 0) != 0 && head.rfind("HTTP/1.0 200", 0) != 0)
            throw LoadTestError(fmt::format("CONNECT refused: {}", head.substr(0, head.find('\r'))));
        return s;
    }

    if (protocol != ProxyProtocol::socks5)
        throw LoadTestError("http_forward cannot open a raw tunnel");

    auto read_n = [&](std::size_t n) {
        std::string out(n, '\0');
        if (!recv_exact(fd, std::as_writable_bytes(std::span(out.data(), n)), timeout))
            throw LoadTestError("SOCKS5: proxy closed during negotiation");
        return out;
    };
    const char method = credentials ? 0x02 : 0x00;
    const char greeting[3] = {0x05, 0x01, method};
    send_all(fd, std::string_view(greeting, 3));
    auto choice = read_n(2);
    if (choice[0] != 0x05 || choice[1] != method)
        throw LoadTestError("SOCKS5: no acceptable method");
    if (credentials) {
        std::string auth;
        auth += '\x01';
        auth += static_cast<char>(credentials->username.size());
        auth += credentials->username;
        auth += static_cast<char>(credentials->password.size());
        auth += credentials->password;
        send_all(fd, auth);
        auto status = read_n(2);
        if (status[1] != 0x00)
            throw LoadTestError("SOCKS5: authentication failed");
    }
    std::string req = {0x05, 0x01, 0x00, 0x01};
    std::uint32_t addr = htonl(target.address.value());
    std::uint16_t port = htons(target.port);
    req.append(reinterpret_cast<const char*>(&addr), 4);
    req.append(reinterpret_cast<const char*>(&port), 2);
    send_all(fd, req);
    auto reply = read_n(10);
    if (reply[1] != 0x00)
        throw LoadTestError(fmt::format("SOCKS5: CONNECT failed with reply 0x{:02x}", static_cast<unsigned char>(reply[1])));
    return s;
}

namespace {

struct ClientRun {
    ClientResult result;
    Steady::time_point down_start{};
    std::string error;
};

/// One synthetic client: timed download (with a latency pinger), then timed upload.
void run_client(const LoadTestPlan& plan, std::function<Socket(Ipv4Address)> open, Ipv4Address source,
                std::barrier<>& sync, ClientRun& run)
{
    auto& r = run.result;
    r.source = source;
    bool in_barrier = true;
    try {
        Socket down = open(source);
        Socket ping = open(source);

        sync.arrive_and_wait();
        run.down_start = Steady::now();
        const auto down_deadline = run.down_start + plan.duration_down;

        std::atomic<bool> ping_failed{false};
        std::jthread pinger([&] {
            const int fd = ping.fd();
            char mode = 'P';
            if (!send_all(fd, std::string_view(&mode, 1))) {
                ping_failed = true;
                return;
            }
            r.bytes_up += 1;
            while (Steady::now() < down_deadline) {
                const auto sent_at = Steady::now();
                char probe = 'x';
                char echo = 0;
                if (!send_all(fd, std::string_view(&probe, 1)) || !wait_readable(fd, Millis{10'000}) ||
                    ::recv(fd, &echo, 1, 0) != 1) {
                    ping_failed = true;
                    return;
                }
                r.latencies_ms.push_back(seconds_between(sent_at, Steady::now()) * 1000.0);
                std::this_thread::sleep_until(std::min(down_deadline, sent_at + plan.ping_interval));
            }
        });

        std::uint64_t in_window = 0;
        std::uint64_t down_bytes = 0;
        std::uint64_t up_bytes = 0;
        {
            const int fd = down.fd();
            char mode = 'D';
            if (!send_all(fd, std::string_view(&mode, 1)))
                throw LoadTestError("download: request failed");
            up_bytes += 1;
            std::vector<std::byte> buf(64 * 1024);
            while (Steady::now() < down_deadline) {
                pollfd pfd{fd, POLLIN, 0};
                int n = ::poll(&pfd, 1, std::max(1, remaining_ms(down_deadline)));
                if (n <= 0)
                    continue;
                long got = recv_some(fd, buf);
                if (got <= 0)
                    throw LoadTestError("download: origin closed early");
                in_window += static_cast<std::uint64_t>(got);
            }
            char stop = 'S';
            send_all(fd, std::string_view(&stop, 1));
            up_bytes += 1;
            down_bytes = in_window + drain(fd, Millis{30'000});
        }
        r.throughput_down = static_cast<double>(in_window) * 8.0 / std::chrono::duration<double>(plan.duration_down).count();

        pinger.join();
        if (ping_failed)
            throw LoadTestError("latency probe failed");
        shutdown_write(ping.fd());
        std::uint64_t echoed = drain(ping.fd(), Millis{5000});
        r.bytes_up += r.latencies_ms.size();
        r.bytes_down += r.latencies_ms.size() + echoed;

        Socket up = open(source);
        sync.arrive_and_wait();
        in_barrier = false;
        {
            const int fd = up.fd();
            set_send_timeout(fd, Millis{30'000});
            const auto start = Steady::now();
            const auto deadline = start + plan.duration_up;
            std::string chunk(16 * 1024, 'u');
            chunk[0] = 'U';
            std::uint64_t sent = 0;
            while (Steady::now() < deadline) {
                if (!send_all(fd, chunk))
                    throw LoadTestError("upload: write failed");
                sent += chunk.size();
                chunk[0] = 'u';
            }
            shutdown_write(fd);
            std::string count(8, '\0');
            if (!recv_exact(fd, std::as_writable_bytes(std::span(count.data(), 8)), Millis{60'000}))
                throw LoadTestError("upload: origin did not acknowledge");
            const auto elapsed = seconds_between(start, Steady::now());
            std::uint64_t received = 0;
            for (unsigned char c : count)
                received = (received << 8) | c;
            // The origin's count excludes the mode byte.
            if (received + 1 != sent)
                throw LoadTestError(fmt::format("upload: origin saw {} of {} payload bytes", received, sent - 1));
            r.throughput_up = static_cast<double>(received) * 8.0 / elapsed;
            up_bytes += sent;
            down_bytes += 8 + drain(fd, Millis{5000});
        }
        r.bytes_up += up_bytes;
        r.bytes_down += down_bytes;
    } catch (const std::exception& e) {
        run.error = e.what();
        if (in_barrier)
            sync.arrive_and_drop();
    }
}

} // namespace

LoadTestReport run_load_test(const LoadTestPlan& plan, std::optional<Endpoint> proxy, Endpoint origin)
{
    if (auto err = plan.validation_error(); !err.empty())
        throw std::invalid_argument(err);

    LoadTestReport report;
    report.plan = plan;

    for (int rep = 0; rep < plan.repetitions; ++rep) {
        std::unique_ptr<RateLimitedLink> link;
        const Endpoint first_hop = proxy ? *proxy : origin;
        if (plan.link_rate_limit)
            link = std::make_unique<RateLimitedLink>(*plan.link_rate_limit, first_hop);
        const Endpoint entry = link ? link->endpoint() : first_hop;

        auto connect = [&](Ipv4Address source) -> Socket {
            if (proxy)
                return open_tunnel(entry, plan.protocol, origin, source, plan.credentials);
            try {
                return connect_tcp(entry, source);
            } catch (const NetError& e) {
                throw LoadTestError(fmt::format("connect to origin: {}", e.what()));
            }
        };
        auto open = [&](Ipv4Address source) -> Socket {
            Socket s = connect(source);
            if (link)
                set_buffers(s.fd(), kLinkBufferBytes);
            return s;
        };

        std::vector<ClientRun> runs(static_cast<std::size_t>(plan.client_count));
        std::barrier<> sync(plan.client_count);
        std::vector<std::thread> threads;
        for (int k = 0; k < plan.client_count; ++k) {
            Ipv4Address source{127, 0, 0, static_cast<std::uint8_t>(plan.first_source_octet + k)};
            threads.emplace_back(
                [&, source, k] { run_client(plan, open, source, sync, runs[static_cast<std::size_t>(k)]); });
        }
        for (auto& t : threads)
            t.join();

        std::string failure;
        for (const auto& r : runs) {
            if (!r.error.empty()) {
                failure = fmt::format("client {}: {}", r.result.source.to_string(), r.error);
                break;
            }
        }
        if (!failure.empty()) {
            report.diagnostics.push_back(fmt::format("repetition {} discarded: {}", rep + 1, failure));
            spdlog::warn("{}", report.diagnostics.back());
            continue;
        }

        RepetitionResult result;
        std::vector<double> downs;
        std::vector<double> ups;
        std::vector<double> latencies;
        auto first_start = runs.front().down_start;
        auto last_start = runs.front().down_start;
        for (auto& r : runs) {
            downs.push_back(r.result.throughput_down);
            ups.push_back(r.result.throughput_up);
            latencies.insert(latencies.end(), r.result.latencies_ms.begin(), r.result.latencies_ms.end());
            first_start = std::min(first_start, r.down_start);
            last_start = std::max(last_start, r.down_start);
            result.clients.push_back(std::move(r.result));
        }
        result.aggregate_down = std::accumulate(downs.begin(), downs.end(), 0.0);
        result.aggregate_up = std::accumulate(ups.begin(), ups.end(), 0.0);
        result.jfi_down = compute_jfi(downs);
        result.jfi_up = compute_jfi(ups);
        auto lat = mean_stddev(latencies);
        result.latency_mean_ms = lat.mean;
        result.latency_stddev_ms = lat.stddev;
        result.start_skew_ms = seconds_between(first_start, last_start) * 1000.0;
        report.repetitions.push_back(std::move(result));
    }

    if (report.repetitions.empty())
        throw LoadTestError(report.diagnostics.empty() ? "no repetitions completed" : report.diagnostics.back());

    std::vector<double> agg_down;
    std::vector<double> agg_up;
    std::vector<double> jfi_down;
    std::vector<double> jfi_up;
    std::vector<double> latencies;
    for (const auto& r : report.repetitions) {
        agg_down.push_back(r.aggregate_down);
        agg_up.push_back(r.aggregate_up);
        if (r.jfi_down)
            jfi_down.push_back(*r.jfi_down);
        if (r.jfi_up)
            jfi_up.push_back(*r.jfi_up);
        for (const auto& c : r.clients)
            latencies.insert(latencies.end(), c.latencies_ms.begin(), c.latencies_ms.end());
    }
    report.aggregate_down = mean_stddev(agg_down);
    report.aggregate_up = mean_stddev(agg_up);
    report.jfi_down = mean_stddev(jfi_down);
    report.jfi_up = mean_stddev(jfi_up);
    report.latency_ms = mean_stddev(latencies);
    return report;
}

nlohmann::json LoadTestReport::to_json() const
{
    using nlohmann::json;
    auto ms = [](const MeanStd& m) { return json{{"mean", m.mean}, {"stddev", m.stddev}}; };
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };

    json reps = json::array();
    for (const auto& r : repetitions) {
        json clients = json::array();
        for (const auto& c : r.clients) {
            auto lat = mean_stddev(c.latencies_ms);
            clients.push_back({{"source", c.source.to_string()},
                               {"throughput_down_bps", c.throughput_down},
                               {"throughput_up_bps", c.throughput_up},
                               {"latency_ms", ms(lat)},
                               {"latency_samples", c.latencies_ms.size()},
                               {"bytes_up", c.bytes_up},
                               {"bytes_down", c.bytes_down}});
        }
        reps.push_back({{"clients", clients},
                        {"aggregate_down_bps", r.aggregate_down},
                        {"aggregate_up_bps", r.aggregate_up},
                        {"jfi_down", opt(r.jfi_down)},
                        {"jfi_up", opt(r.jfi_up)},
                        {"latency_ms", {{"mean", r.latency_mean_ms}, {"stddev", r.latency_stddev_ms}}},
                        {"start_skew_ms", r.start_skew_ms}});
    }
    return {{"plan",
             {{"client_count", plan.client_count},
              {"duration_down_s", std::chrono::duration<double>(plan.duration_down).count()},
              {"duration_up_s", std::chrono::duration<double>(plan.duration_up).count()},
              {"protocol", to_string(plan.protocol)},
              {"link_rate_limit_bps", opt(plan.link_rate_limit)},
              {"repetitions", plan.repetitions}}},
            {"summary",
             {{"aggregate_down_bps", ms(aggregate_down)},
              {"aggregate_up_bps", ms(aggregate_up)},
              {"jfi_down", ms(jfi_down)},
              {"jfi_up", ms(jfi_up)},
              {"latency_ms", ms(latency_ms)},
              {"completed_repetitions", repetitions.size()}}},
            {"repetitions", reps},
            {"diagnostics", diagnostics}};
}

std::string LoadTestReport::to_table() const
{
    auto mbps = [](const MeanStd& m) { return fmt::format("{:.2f} ± {:.2f}", m.mean / 1e6, m.stddev / 1e6); };
    std::string out;
    out += fmt::format("{:>7}  {:>18}  {:>18}  {:>16}  {:>8}  {:>8}\n", "Clients", "Down (Mbit/s)", "Up (Mbit/s)",
                       "Latency (ms)", "JFI down", "JFI up");
    const bool trivial = plan.client_count == 1;
    out += fmt::format("{:>7}  {:>18}  {:>18}  {:>16}  {:>8}  {:>8}\n", plan.client_count, mbps(aggregate_down),
                       mbps(aggregate_up), fmt::format("{:.2f} ± {:.2f}", latency_ms.mean, latency_ms.stddev),
                       fmt::format("{:.3f}{}", jfi_down.mean, trivial ? "*" : ""),
                       fmt::format("{:.3f}{}", jfi_up.mean, trivial ? "*" : ""));
    if (trivial)
        out += "  * one client: trivially fair\n";
    out += fmt::format("  {} of {} repetitions completed", repetitions.size(), plan.repetitions);
    if (plan.link_rate_limit)
        out += fmt::format(", link limited to {:.2f} Mbit/s", *plan.link_rate_limit / 1e6);
    out += "\n";
    for (const auto& d : diagnostics)
        out += "  " + d + "\n";
    return out;
}

} // namespace gateway
