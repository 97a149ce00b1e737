#pragma once

// Parameter exchange between agents and the cloud.
//
// Frame: 4-byte big-endian length, then a JSON envelope of that many bytes.
// The payload (a parameter envelope) travels base64-encoded.

#include "fedimit/env.hpp"
#include "fedimit/error.hpp"
#include "fedimit/fusion.hpp"
#include "fedimit/nn.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

namespace fedimit::netproto {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::size_t kMaxFrameBytes = 64u << 20;
inline constexpr std::chrono::milliseconds kDefaultTimeout{10000};
inline constexpr const char* kDefaultBind = "127.0.0.1:7878";

class TruncatedFrame : public DecodeError { using DecodeError::DecodeError; };
class FrameTooLarge : public DecodeError { using DecodeError::DecodeError; };
/// Well-formed JSON that breaks an envelope invariant.
class InvalidEnvelope : public DecodeError { using DecodeError::DecodeError; };

enum class MsgType { UPLOAD_PARAMS, UPLOAD_ACK, REQUEST_GUIDE, GUIDE_RESPONSE, NOT_READY, ERROR };

std::string_view to_string(MsgType t);
/// Throws InvalidEnvelope for an unknown name.
MsgType msg_type_from_string(std::string_view s);

struct Envelope {
    MsgType msg_type = MsgType::ERROR;
    int protocol_version = kProtocolVersion;
    std::string agent_id;
    std::optional<env::ModalityId> modality;
    std::string payload;
    std::uint64_t request_id = 0;
    /// Registry version on UPLOAD_ACK, guide version on GUIDE_RESPONSE.
    std::uint64_t version = 0;
    /// Human-readable reason on ERROR and NOT_READY.
    std::string detail;

    friend bool operator==(const Envelope&, const Envelope&) = default;
};

/// Throws InvalidEnvelope: payload present iff UPLOAD_PARAMS or
/// GUIDE_RESPONSE; modality present on UPLOAD_PARAMS, REQUEST_GUIDE and
/// GUIDE_RESPONSE; agent_id 1..128 chars of [A-Za-z0-9._-]; detail printable ASCII.
void validate(const Envelope& e);

std::string encode(const Envelope& e);

/// Decodes exactly one frame. Throws TruncatedFrame, FrameTooLarge,
/// DecodeError (bad JSON, trailing bytes), VersionMismatch or InvalidEnvelope.
Envelope decode(std::string_view frame);

/// Accumulates stream bytes and cuts complete frames.
class FrameBuffer {
public:
    void append(std::string_view bytes) { buf_.append(bytes); }
    /// Next complete frame (prefix included). Throws FrameTooLarge as soon as
    /// a header declares more than the cap.
    std::optional<std::string> next();
    void clear() { buf_.clear(); }
    bool empty() const { return buf_.empty(); }
    std::size_t size() const { return buf_.size(); }

private:
    std::string buf_;
};

struct ServerOptions {
    /// Run a fusion round once every trainable modality has a fresh upload.
    bool auto_fuse = false;
};

/// Server-side handling of one raw frame: the reply frame, plus whether an
/// auto-fusion round is due after the reply goes out. Never throws on bad input.
struct Handled {
    std::string reply;
    bool fuse_after = false;
};
Handled handle_frame(fusion::Cloud& cloud, std::string_view frame, const ServerOptions& options);
Envelope handle(fusion::Cloud& cloud, const Envelope& request, const ServerOptions& options, bool& fuse_after);

/// Client side of one request/response exchange.
class Transport {
public:
    virtual ~Transport() = default;
    virtual Envelope request(const Envelope& e) = 0;
};

/// Talks to a Cloud object in the same process through encode/decode on both
/// sides, so the bytes are exactly those a socket would carry.
class InProcessTransport : public Transport {
public:
    explicit InProcessTransport(fusion::Cloud& cloud, ServerOptions options = {})
        : cloud_(cloud), options_(options) {}
    Envelope request(const Envelope& e) override;
    /// Feeds raw bytes as one delivery and returns the raw reply frames.
    std::vector<std::string> deliver(std::string_view bytes);

private:
    fusion::Cloud& cloud_;
    ServerOptions options_;
    FrameBuffer buffer_;
};

/// One TCP connection per request.
class SocketTransport : public Transport {
public:
    explicit SocketTransport(std::string address, std::chrono::milliseconds timeout = kDefaultTimeout)
        : address_(std::move(address)), timeout_(timeout) {}
    Envelope request(const Envelope& e) override;

private:
    std::string address_;
    std::chrono::milliseconds timeout_;
};

/// Running TCP server; stop() or destruction drains in-flight requests.
class Server {
public:
    Server(fusion::Cloud& cloud, const std::string& bind, ServerOptions options);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// host:port actually bound (port 0 in the bind address picks a free one).
    const std::string& address() const { return address_; }
    void stop();
    /// Blocks until stop() is called from another thread.
    void wait();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    std::string address_;
};

/// Throws ConnectionError when the address cannot be bound.
std::unique_ptr<Server> serve_cloud(const std::string& bind, fusion::Cloud& cloud, ServerOptions options = {});

/// `flag` if non-empty, else $FEDIMIT_BIND, else kDefaultBind.
std::string resolve_bind(const std::string& flag);

/// Fresh process-wide request id.
std::uint64_t next_request_id();

/// Returns the acknowledged registry version. Throws ProtocolError on an
/// ERROR reply or a request_id mismatch.
std::uint64_t client_upload(Transport& transport, const std::string& agent_id, env::ModalityId modality,
                            const nn::ParameterSet& params);
std::uint64_t client_upload(const std::string& address, const std::string& agent_id, env::ModalityId modality,
                            const nn::ParameterSet& params, std::chrono::milliseconds timeout = kDefaultTimeout);

/// nullopt on NOT_READY.
std::optional<fusion::ServiceResponse> client_request_guide(Transport& transport, env::ModalityId modality,
                                                            const std::string& agent_id = "agent");
std::optional<fusion::ServiceResponse> client_request_guide(const std::string& address, env::ModalityId modality,
                                                            std::chrono::milliseconds timeout = kDefaultTimeout);

/// fusion::CloudLink over a Transport, for the federation loop.
class TransportLink : public fusion::CloudLink {
public:
    explicit TransportLink(Transport& transport) : transport_(transport) {}
    std::uint64_t upload(const std::string& agent_id, env::ModalityId modality, const std::string& bytes) override;
    std::optional<fusion::ServiceResponse> request_guide(env::ModalityId modality) override;

private:
    Transport& transport_;
};

}  // namespace fedimit::netproto
