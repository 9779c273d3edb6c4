#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <string>

#include <httplib.h>
// httplib pulls in <resolv.h>, whose _res macro breaks Eigen's headers.
#ifdef _res
#undef _res
#endif

#include "ctxfilter/gateway.hpp"

namespace ctxfilter {

/// Real HTTP transport over cpp-httplib. Base URL carries scheme, host, and
/// optional port, e.g. "https://api.example.com" or "http://localhost:8000".
class HttplibTransport : public Transport {
public:
    explicit HttplibTransport(std::string base_url,
                              std::chrono::seconds timeout = std::chrono::seconds(120))
        : base_url_(std::move(base_url)), timeout_(timeout) {}

    HttpResponse post(const std::string& path, const std::string& body,
                      const std::map<std::string, std::string>& headers) override {
        httplib::Client client(base_url_);
        client.set_connection_timeout(timeout_);
        client.set_read_timeout(timeout_);
        httplib::Headers req_headers;
        std::string content_type = "application/json";
        for (const auto& [name, value] : headers) {
            if (name == "Content-Type") {
                content_type = value;
            } else {
                req_headers.emplace(name, value);
            }
        }
        auto result = client.Post(path, req_headers, body, content_type);
        if (!result)
            throw TransportError("POST " + base_url_ + path + " failed: " +
                                 httplib::to_string(result.error()));
        return HttpResponse{result->status, result->body};
    }

private:
    std::string base_url_;
    std::chrono::seconds timeout_;
};

} // namespace ctxfilter
