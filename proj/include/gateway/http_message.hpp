#pragma once

#include "gateway/common.hpp"

#include <string>
#include <vector>

namespace gateway::http {

struct Header {
    std::string name;
    std::string value;
};

struct RequestHead {
    std::string method;
    std::string target;
    std::string version; ///< "HTTP/1.1"
    std::vector<Header> headers;

    std::optional<std::string> header(std::string_view name) const;
    /// Comma-separated tokens of every header with this name, lowercased.
    std::vector<std::string> tokens(std::string_view name) const;
};

struct ResponseHead {
    std::string version;
    int status = 0;
    std::string reason;
    std::vector<Header> headers;

    std::optional<std::string> header(std::string_view name) const;
    std::vector<std::string> tokens(std::string_view name) const;
};

/// `text` is a complete head ending in CRLFCRLF (bare LF tolerated).
std::optional<RequestHead> parse_request_head(std::string_view text);
std::optional<ResponseHead> parse_response_head(std::string_view text);

struct AbsoluteUri {
    std::string scheme;
    std::string host;
    std::uint16_t port = 0;
    std::string authority;      ///< as written, for a synthesized Host header
    std::string path_and_query; ///< "/" when empty
};

std::optional<AbsoluteUri> parse_absolute_uri(std::string_view uri);

/// "host:port" (port required), "[v6]:port" rejected.
std::optional<TargetAddress> parse_authority(std::string_view authority);

/// Proxy-Authorization: Basic <base64(user:pass)>
std::optional<Credentials> parse_basic_credentials(std::string_view header_value);
std::string basic_credentials_header(const Credentials& c);

std::string base64_encode(std::string_view in);
std::optional<std::string> base64_decode(std::string_view in);

/// Hop-by-hop headers removed when forwarding (Transfer-Encoding is kept for framing).
bool is_hop_by_hop(std::string_view name);

bool request_wants_close(const RequestHead& h);
bool response_wants_close(const ResponseHead& h);

enum class BodyKind { none, fixed, chunked, until_close };

struct BodyFraming {
    BodyKind kind = BodyKind::none;
    std::uint64_t length = 0;
};

/// nullopt for an invalid Content-Length.
std::optional<BodyFraming> request_body(const RequestHead& h);
std::optional<BodyFraming> response_body(const ResponseHead& h, std::string_view request_method);

std::string status_response(int status, std::string_view reason, std::string_view body,
                            const std::vector<Header>& extra = {});

} // namespace gateway::http
