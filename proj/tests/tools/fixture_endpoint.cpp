// Local HTTP stand-in for the responder/judge/embedder endpoints, backed by
// the scripted fixture transport. Lets the CLI run end to end over real HTTP
// without any external service.

#include <cstdio>
#include <string>

#include <httplib.h>
// httplib pulls in <resolv.h>, whose _res macro breaks Eigen's headers.
#ifdef _res
#undef _res
#endif

#include <CLI11.hpp>

#include "ctxfilter/corpus.hpp"
#include "ctxfilter/ndjson.hpp"
#include "support/scripted_transport.hpp"

int main(int argc, char** argv) {
    CLI::App app{"scripted fixture endpoint"};
    std::string fixtures_dir;
    std::string host = "127.0.0.1";
    int port = 0; // 0 = ephemeral
    int embedding_dim = 32;
    app.add_option("--fixtures", fixtures_dir, "tests/fixtures directory")->required();
    app.add_option("--host", host, "bind host");
    app.add_option("--port", port, "bind port (0 for ephemeral)");
    app.add_option("--embedding-dim", embedding_dim, "embedding dimensionality");
    CLI11_PARSE(app, argc, argv);

    namespace fs = std::filesystem;
    std::vector<ctxfilter::RawConversation> corpus;
    for (const auto& rec :
         ctxfilter::read_ndjson(fs::path(fixtures_dir) / "raw_corpus.ndjson"))
        corpus.push_back(ctxfilter::raw_conversation_from_json(rec));
    auto script =
        nlohmann::json::parse(ctxfilter::read_file(fs::path(fixtures_dir) / "script.json"));

    ctxtest::ScriptedTransport transport(corpus, script, embedding_dim, /*lenient=*/true);

    httplib::Server server;
    auto handle = [&transport](const httplib::Request& req, httplib::Response& res) {
        try {
            auto reply = transport.post(req.path, req.body, {});
            res.status = reply.status;
            res.set_content(reply.body, "application/json");
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
        }
    };
    server.Post("/v1/chat/completions", handle);
    server.Post("/v1/embeddings", handle);

    if (port == 0) {
        port = server.bind_to_any_port(host);
        if (port <= 0) {
            std::fprintf(stderr, "could not bind\n");
            return 1;
        }
        std::printf("PORT=%d\n", port);
        std::fflush(stdout);
        server.listen_after_bind();
    } else {
        std::printf("PORT=%d\n", port);
        std::fflush(stdout);
        server.listen(host, port);
    }
    return 0;
}
