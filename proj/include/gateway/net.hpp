#pragma once

#include "gateway/common.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace gateway {

/// Owning file descriptor for a TCP socket.
class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    ~Socket() { close(); }

    Socket(Socket&& other) noexcept : fd_(other.release()) {}
    Socket& operator=(Socket&& other) noexcept
    {
        if (this != &other) {
            close();
            fd_ = other.release();
        }
        return *this;
    }
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    explicit operator bool() const { return valid(); }

    int release()
    {
        int fd = fd_;
        fd_ = -1;
        return fd;
    }
    void close();

private:
    int fd_ = -1;
};

class BindError : public std::runtime_error {
public:
    BindError(Ipv4Address address, std::uint16_t port, const std::string& reason);
    std::uint16_t port() const { return port_; }

private:
    std::uint16_t port_;
};

class NetError : public std::runtime_error {
public:
    explicit NetError(const std::string& what, int code = 0) : std::runtime_error(what), code_(code) {}
    /// errno of the failed call, 0 when not applicable.
    int code() const { return code_; }

private:
    int code_;
};

struct Endpoint {
    Ipv4Address address;
    std::uint16_t port = 0;

    std::string to_string() const;
    /// "a.b.c.d:port", port 1-65535.
    static std::optional<Endpoint> parse(std::string_view text);
    friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

/// Listening socket with SO_REUSEADDR; port 0 picks an ephemeral port.
Socket listen_tcp(Ipv4Address address, std::uint16_t port, int backlog = 512);

/// Connects to `remote`, binding the local side to `local` first when given.
/// Throws NetError on failure; errno-derived reason in the message.
Socket connect_tcp(const Endpoint& remote, std::optional<Ipv4Address> local = std::nullopt,
                   Millis timeout = Millis{10'000}, const std::string& bind_device = {});

Endpoint local_endpoint(int fd);
Endpoint peer_endpoint(int fd);

/// Writes the whole buffer, retrying on EINTR/partial writes. False on error or peer close.
bool send_all(int fd, std::span<const std::byte> data);
bool send_all(int fd, std::string_view data);

/// One recv(); returns bytes read, 0 on orderly close, -1 on error.
long recv_some(int fd, std::span<std::byte> buf);

/// Reads exactly buf.size() bytes unless the peer closes, an error occurs, or `timeout` passes.
bool recv_exact(int fd, std::span<std::byte> buf, Millis timeout);

/// Waits until fd is readable. False on timeout.
bool wait_readable(int fd, Millis timeout);

void set_nodelay(int fd);
void shutdown_both(int fd);
void shutdown_write(int fd);

struct InterfaceInfo {
    std::string name;
    bool up = false;
    std::vector<Ipv4Address> addresses;
};

/// Enumerates host interfaces (IPv4 addresses only). Throws NetError if enumeration fails.
std::vector<InterfaceInfo> list_interfaces();

} // namespace gateway
