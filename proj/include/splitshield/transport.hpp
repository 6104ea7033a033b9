#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "splitshield/defense.hpp"
#include "splitshield/graph.hpp"

namespace splitshield {

// Wire frame:
//   magic "SSCI", version u8, msg_type u8 (0=FEATURES, 1=LOGITS_SET, 2=ACK,
//   3=ERROR), tensor_count u32 LE; per tensor: ndim u8, dims u32 LE each,
//   f32 LE payload. LOGITS_SET and ACK carry a trailing f64 LE with the
//   server's self-reported compute seconds; ERROR carries a trailing u32 LE
//   error code. Frames above 256 MiB are rejected.

enum class MsgType : std::uint8_t {
    Features = 0,
    LogitsSet = 1,
    Ack = 2,
    Error = 3,
};

enum : std::uint32_t {
    kErrBadMagic = 1,
    kErrBadVersion = 2,
    kErrBadType = 3,
    kErrOversize = 4,
    kErrMalformed = 5,
};

constexpr std::uint8_t kFrameVersion = 1;
constexpr std::size_t kMaxFrameBytes = 256ull * 1024 * 1024;

struct Frame {
    MsgType type = MsgType::Features;
    std::vector<Tensor> tensors;
    double server_seconds = 0.0;   // LOGITS_SET / ACK only
    std::uint32_t error_code = 0;  // ERROR only
};

struct FrameError : std::runtime_error {
    std::uint32_t code;
    explicit FrameError(std::uint32_t c, const std::string& what)
        : std::runtime_error(what), code(c) {}
};

std::vector<std::uint8_t> encode_frame(const Frame& f);
Frame decode_frame(const std::vector<std::uint8_t>& bytes);  // throws FrameError

struct LatencyBreakdown {
    double client_s = 0.0;
    double server_s = 0.0;
    double comm_s = 0.0;
    double total_s = 0.0;
};

struct ServerOptions {
    bool parallel_bodies = false;  // sequential is the default (stable timing)
};

// Serial-accept loopback inference server: on FEATURES it runs every body on
// the received tensor and replies LOGITS_SET with one tensor per body in
// ascending index order plus its compute time. Malformed frames get an ERROR
// reply; a corrupted magic with an otherwise well-formed frame keeps the
// connection alive.
class InferenceServer {
public:
    InferenceServer(std::vector<ModelGraph> bodies, ServerOptions opts = {});
    ~InferenceServer();

    InferenceServer(const InferenceServer&) = delete;
    InferenceServer& operator=(const InferenceServer&) = delete;

    // Binds (port 0 picks an ephemeral port), then serves on a background
    // thread until stop().
    void start(const std::string& host = "127.0.0.1", std::uint16_t port = 0);
    void stop();

    std::uint16_t port() const { return port_; }
    const std::string& host() const { return host_; }

private:
    void serve_loop();
    void handle_connection(int fd);

    std::vector<ModelGraph> bodies_;
    ServerOptions opts_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::string host_;
    std::thread thread_;
    std::atomic<bool> running_{false};
};

struct ClientResult {
    Tensor logits;
    LatencyBreakdown latency;
};

// One synchronous round trip: transmit head(x) (+ fixed noise), receive every
// body's features, combine with the key and finish with the tail. client_s
// covers local compute, server_s is the server's self-reported compute time,
// comm_s = total - client - server.
ClientResult client_infer(const ModelGraph& head, const ModelGraph& tail, const SelectorKey& key,
                          const NoiseSpec& noise, const std::string& host, std::uint16_t port,
                          const Tensor& x);

// Round-trip health check (ACK); throws on failure.
void ping_server(const std::string& host, std::uint16_t port);

}  // namespace splitshield
