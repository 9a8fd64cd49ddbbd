#include "gateway/net.hpp"

#include <charconv>

#include <arpa/inet.h>
#include <fcntl.h>
#include <ifaddrs.h>
#include <net/if.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <map>

#include <fmt/format.h>

namespace gateway {

namespace {

sockaddr_in to_sockaddr(Ipv4Address address, std::uint16_t port)
{
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    sa.sin_addr.s_addr = htonl(address.value());
    return sa;
}

Endpoint from_sockaddr(const sockaddr_in& sa)
{
    return {Ipv4Address{ntohl(sa.sin_addr.s_addr)}, ntohs(sa.sin_port)};
}

std::string errno_text(int err)
{
    return std::strerror(err);
}

} // namespace

void Socket::close()
{
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

BindError::BindError(Ipv4Address address, std::uint16_t port, const std::string& reason)
    : std::runtime_error(fmt::format("cannot bind {}:{}: {}", address.to_string(), port, reason)), port_(port)
{
}

std::optional<Endpoint> Endpoint::parse(std::string_view text)
{
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos)
        return std::nullopt;
    auto addr = Ipv4Address::parse(text.substr(0, colon));
    auto port_text = text.substr(colon + 1);
    unsigned port = 0;
    auto [p, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
    if (!addr || ec != std::errc{} || p != port_text.data() + port_text.size() || port == 0 || port > 65535)
        return std::nullopt;
    return Endpoint{*addr, static_cast<std::uint16_t>(port)};
}

std::string Endpoint::to_string() const
{
    return fmt::format("{}:{}", address.to_string(), port);
}

Socket listen_tcp(Ipv4Address address, std::uint16_t port, int backlog)
{
    Socket s{::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0)};
    if (!s)
        throw BindError(address, port, errno_text(errno));
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    auto sa = to_sockaddr(address, port);
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0)
        throw BindError(address, port, errno_text(errno));
    if (::listen(s.fd(), backlog) != 0)
        throw BindError(address, port, errno_text(errno));
    return s;
}

Socket connect_tcp(const Endpoint& remote, std::optional<Ipv4Address> local, Millis timeout,
                   const std::string& bind_device)
{
    Socket s{::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0)};
    if (!s)
        throw NetError(fmt::format("socket: {}", errno_text(errno)));
#ifdef SO_BINDTODEVICE
    if (!bind_device.empty()) {
        if (::setsockopt(s.fd(), SOL_SOCKET, SO_BINDTODEVICE, bind_device.c_str(),
                         static_cast<socklen_t>(bind_device.size())) != 0) {
            throw NetError(fmt::format("bind to device {}: {}", bind_device, errno_text(errno)));
        }
    }
#endif
    if (local) {
        auto la = to_sockaddr(*local, 0);
        if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&la), sizeof(la)) != 0)
            {
            int err = errno;
            throw NetError(fmt::format("bind {}: {}", local->to_string(), errno_text(err)), err);
        }
    }

    int flags = ::fcntl(s.fd(), F_GETFL, 0);
    ::fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
    auto ra = to_sockaddr(remote.address, remote.port);
    int rc = ::connect(s.fd(), reinterpret_cast<sockaddr*>(&ra), sizeof(ra));
    if (rc != 0 && errno != EINPROGRESS) {
        int err = errno;
        throw NetError(fmt::format("connect {}: {}", remote.to_string(), errno_text(err)), err);
    }
    if (rc != 0) {
        pollfd pfd{s.fd(), POLLOUT, 0};
        int n;
        do {
            n = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
        } while (n < 0 && errno == EINTR);
        if (n == 0)
            throw NetError(fmt::format("connect {}: timed out", remote.to_string()), ETIMEDOUT);
        int err = 0;
        socklen_t len = sizeof(err);
        ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
        if (n < 0)
            err = errno;
        if (err != 0)
            throw NetError(fmt::format("connect {}: {}", remote.to_string(), errno_text(err)), err);
    }
    ::fcntl(s.fd(), F_SETFL, flags);
    set_nodelay(s.fd());
    return s;
}

Endpoint local_endpoint(int fd)
{
    sockaddr_in sa{};
    socklen_t len = sizeof(sa);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
    return from_sockaddr(sa);
}

Endpoint peer_endpoint(int fd)
{
    sockaddr_in sa{};
    socklen_t len = sizeof(sa);
    ::getpeername(fd, reinterpret_cast<sockaddr*>(&sa), &len);
    return from_sockaddr(sa);
}

bool send_all(int fd, std::span<const std::byte> data)
{
    while (!data.empty()) {
        ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR)
                continue;
            return false;
        }
        data = data.subspan(static_cast<std::size_t>(n));
    }
    return true;
}

bool send_all(int fd, std::string_view data)
{
    return send_all(fd, std::as_bytes(std::span{data.data(), data.size()}));
}

long recv_some(int fd, std::span<std::byte> buf)
{
    for (;;) {
        ssize_t n = ::recv(fd, buf.data(), buf.size(), 0);
        if (n < 0 && errno == EINTR)
            continue;
        return static_cast<long>(n);
    }
}

bool wait_readable(int fd, Millis timeout)
{
    pollfd pfd{fd, POLLIN, 0};
    for (;;) {
        int n = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
        if (n < 0 && errno == EINTR)
            continue;
        return n > 0;
    }
}

bool recv_exact(int fd, std::span<std::byte> buf, Millis timeout)
{
    while (!buf.empty()) {
        if (!wait_readable(fd, timeout))
            return false;
        long n = recv_some(fd, buf);
        if (n <= 0)
            return false;
        buf = buf.subspan(static_cast<std::size_t>(n));
    }
    return true;
}

void set_nodelay(int fd)
{
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

void shutdown_both(int fd)
{
    ::shutdown(fd, SHUT_RDWR);
}

void shutdown_write(int fd)
{
    ::shutdown(fd, SHUT_WR);
}

std::vector<InterfaceInfo> list_interfaces()
{
    ifaddrs* head = nullptr;
    if (::getifaddrs(&head) != 0)
        throw NetError(fmt::format("getifaddrs: {}", errno_text(errno)));

    std::vector<InterfaceInfo> out;
    std::map<std::string, std::size_t> index;
    for (ifaddrs* it = head; it != nullptr; it = it->ifa_next) {
        if (it->ifa_name == nullptr)
            continue;
        auto [pos, inserted] = index.try_emplace(it->ifa_name, out.size());
        if (inserted)
            out.push_back({it->ifa_name, false, {}});
        auto& info = out[pos->second];
        info.up = info.up || (it->ifa_flags & IFF_UP) != 0;
        if (it->ifa_addr != nullptr && it->ifa_addr->sa_family == AF_INET) {
            auto* sa = reinterpret_cast<const sockaddr_in*>(it->ifa_addr);
            info.addresses.emplace_back(ntohl(sa->sin_addr.s_addr));
        }
    }
    ::freeifaddrs(head);
    return out;
}

} // namespace gateway
