#include "gateway/discovery.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/ip.h>
#include <netinet/ip_icmp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <chrono>

#include <spdlog/spdlog.h>

#include "gateway/net.hpp"

namespace gateway {

namespace {

struct IcmpSocket {
    Socket socket;
    bool raw = false;
};

std::optional<IcmpSocket> open_icmp_socket()
{
    int fd = ::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC | SOCK_NONBLOCK, IPPROTO_ICMP);
    if (fd >= 0)
        return IcmpSocket{Socket{fd}, false};
    fd = ::socket(AF_INET, SOCK_RAW | SOCK_CLOEXEC | SOCK_NONBLOCK, IPPROTO_ICMP);
    if (fd >= 0)
        return IcmpSocket{Socket{fd}, true};
    return std::nullopt;
}

std::uint16_t icmp_checksum(const std::uint8_t* data, std::size_t len)
{
    std::uint32_t sum = 0;
    for (std::size_t i = 0; i + 1 < len; i += 2)
        sum += static_cast<std::uint32_t>(data[i] << 8 | data[i + 1]);
    if (len & 1)
        sum += static_cast<std::uint32_t>(data[len - 1] << 8);
    while (sum >> 16)
        sum = (sum & 0xffff) + (sum >> 16);
    return static_cast<std::uint16_t>(~sum);
}

sockaddr_in make_addr(Ipv4Address ip, std::uint16_t port)
{
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    sa.sin_addr.s_addr = htonl(ip.value());
    return sa;
}

} // namespace

bool IcmpProber::available()
{
    return open_icmp_socket().has_value();
}

std::optional<std::set<Ipv4Address>> IcmpProber::probe(const std::vector<Ipv4Address>& candidates)
{
    auto sock = open_icmp_socket();
    if (!sock)
        return std::nullopt;
    const int fd = sock->socket.fd();
    const std::uint16_t ident = static_cast<std::uint16_t>(::getpid());

    std::set<Ipv4Address> wanted(candidates.begin(), candidates.end());
    std::uint16_t seq = 0;
    for (auto ip : candidates) {
        std::array<std::uint8_t, 16> pkt{};
        pkt[0] = ICMP_ECHO;
        pkt[4] = static_cast<std::uint8_t>(ident >> 8);
        pkt[5] = static_cast<std::uint8_t>(ident);
        pkt[6] = static_cast<std::uint8_t>(seq >> 8);
        pkt[7] = static_cast<std::uint8_t>(seq);
        ++seq;
        const auto ck = icmp_checksum(pkt.data(), pkt.size());
        pkt[2] = static_cast<std::uint8_t>(ck >> 8);
        pkt[3] = static_cast<std::uint8_t>(ck);
        auto sa = make_addr(ip, 0);
        if (::sendto(fd, pkt.data(), pkt.size(), 0, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0 &&
            errno != EAGAIN && errno != EHOSTUNREACH && errno != ENETUNREACH) {
            spdlog::debug("icmp probe to {} failed: {}", ip.to_string(), std::strerror(errno));
        }
    }

    std::set<Ipv4Address> alive;
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
        const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
        if (left <= Millis::zero() || alive.size() == wanted.size())
            break;
        if (!wait_readable(fd, left))
            break;
        std::array<std::uint8_t, 1500> buf{};
        sockaddr_in from{};
        socklen_t len = sizeof(from);
        ssize_t n;
        while ((n = ::recvfrom(fd, buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&from), &len)) > 0) {
            std::size_t off = 0;
            if (sock->raw) {
                off = static_cast<std::size_t>(buf[0] & 0x0f) * 4;
            }
            if (static_cast<std::size_t>(n) > off && buf[off] == ICMP_ECHOREPLY) {
                Ipv4Address src{ntohl(from.sin_addr.s_addr)};
                if (wanted.contains(src))
                    alive.insert(src);
            }
            len = sizeof(from);
        }
    }
    return alive;
}

std::optional<std::set<Ipv4Address>> TcpProber::probe(const std::vector<Ipv4Address>& candidates)
{
    std::set<Ipv4Address> alive;
    constexpr std::size_t kBatch = 256;

    struct Attempt {
        Socket socket;
        Ipv4Address ip;
    };

    std::vector<std::pair<Ipv4Address, std::uint16_t>> work;
    for (auto ip : candidates)
        for (auto port : ports_)
            work.emplace_back(ip, port);

    bool any_socket = false;
    for (std::size_t start = 0; start < work.size(); start += kBatch) {
        std::vector<Attempt> attempts;
        for (std::size_t i = start; i < std::min(work.size(), start + kBatch); ++i) {
            auto [ip, port] = work[i];
            if (alive.contains(ip))
                continue;
            Socket s{::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0)};
            if (!s)
                continue;
            any_socket = true;
            auto sa = make_addr(ip, port);
            int rc = ::connect(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
            if (rc == 0 || errno == ECONNREFUSED) {
                alive.insert(ip);
                continue;
            }
            if (errno == EINPROGRESS)
                attempts.push_back({std::move(s), ip});
        }

        const auto deadline = std::chrono::steady_clock::now() + timeout_;
        while (!attempts.empty()) {
            const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
            if (left <= Millis::zero())
                break;
            std::vector<pollfd> fds;
            for (const auto& a : attempts)
                fds.push_back({a.socket.fd(), POLLOUT, 0});
            int n = ::poll(fds.data(), fds.size(), static_cast<int>(left.count()));
            if (n <= 0)
                break;
            std::vector<Attempt> still;
            for (std::size_t i = 0; i < attempts.size(); ++i) {
                if (fds[i].revents == 0) {
                    still.push_back(std::move(attempts[i]));
                    continue;
                }
                int err = 0;
                socklen_t len = sizeof(err);
                ::getsockopt(fds[i].fd, SOL_SOCKET, SO_ERROR, &err, &len);
                if (err == 0 || err == ECONNREFUSED)
                    alive.insert(attempts[i].ip);
            }
            attempts = std::move(still);
        }
    }
    if (!any_socket && !work.empty())
        return std::nullopt;
    return alive;
}

std::unique_ptr<Prober> make_default_prober()
{
    if (IcmpProber::available())
        return std::make_unique<IcmpProber>();
    spdlog::info("discovery: ICMP unavailable, using TCP reachability probes");
    return std::make_unique<TcpProber>();
}

} // namespace gateway
