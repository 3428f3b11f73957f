#pragma once

// HTTP client for an answer-judging service and a deterministic local mock.
//
// Wire contract: POST <endpoint path, default /judge> with
//   {"question": str, "answer": str, "reference": str}
// and a 200 response {"score": number in [1,5], "accurate": 0|1}.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "fmm/common.hpp"
#include "fmm/metrics.hpp"

namespace fmm {

inline constexpr const char* kJudgeEndpointEnv = "FMM_JUDGE_ENDPOINT";

struct JudgeScore {
  double score = 1.0;
  bool accurate = false;
};

enum class JudgeErrorKind { Network, Timeout, Malformed, OutOfRange };

inline const char* to_string(JudgeErrorKind k) {
  switch (k) {
    case JudgeErrorKind::Network: return "judge_network";
    case JudgeErrorKind::Timeout: return "judge_timeout";
    case JudgeErrorKind::Malformed: return "judge_malformed";
    case JudgeErrorKind::OutOfRange: return "judge_out_of_range";
  }
  return "judge_error";
}

class JudgeError : public Error {
 public:
  JudgeError(JudgeErrorKind kind, const std::string& what) : Error(to_string(kind), what), kind_(kind) {}
  JudgeErrorKind kind() const { return kind_; }

 private:
  JudgeErrorKind kind_;
};

struct JudgeOptions {
  std::chrono::milliseconds timeout{5000};
  unsigned retries = 0;  // extra attempts after a network or timeout failure (0 or 1)
};

/// Endpoint from the environment, if set and nonempty.
inline std::optional<std::string> default_judge_endpoint() {
  const char* v = std::getenv(kJudgeEndpointEnv);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;  // defaults to /judge
};

inline Endpoint parse_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos || url.compare(0, scheme, "http") != 0)
    throw JudgeError(JudgeErrorKind::Network, "endpoint must be an http:// URL: '" + url + "'");
  const auto slash = url.find('/', scheme + 3);
  Endpoint e;
  e.base = url.substr(0, slash);
  e.path = slash == std::string::npos ? "/judge" : url.substr(slash);
  if (e.base.size() <= scheme + 3) throw JudgeError(JudgeErrorKind::Network, "endpoint has no host: '" + url + "'");
  return e;
}

/// Parses and range-checks a response body.
inline JudgeScore parse_judge_response(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw JudgeError(JudgeErrorKind::Malformed, std::string("response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("score") || !j.contains("accurate"))
    throw JudgeError(JudgeErrorKind::Malformed, "response lacks score or accurate");
  const auto& s = j["score"];
  const auto& a = j["accurate"];
  if (!s.is_number()) throw JudgeError(JudgeErrorKind::Malformed, "score is not a number");
  JudgeScore out;
  out.score = s.get<double>();
  if (a.is_boolean()) {
    out.accurate = a.get<bool>();
  } else if (a.is_number_integer()) {
    const auto v = a.get<long long>();
    if (v != 0 && v != 1) throw JudgeError(JudgeErrorKind::OutOfRange, "accurate must be 0 or 1");
    out.accurate = v == 1;
  } else {
    throw JudgeError(JudgeErrorKind::Malformed, "accurate is not 0/1");
  }
  if (!std::isfinite(out.score) || out.score < 1.0 || out.score > 5.0)
    throw JudgeError(JudgeErrorKind::OutOfRange, "score " + s.dump() + " outside [1,5]");
  return out;
}

inline JudgeScore judge(const std::string& endpoint, const std::string& question, const std::string& answer,
                        const std::string& reference, const JudgeOptions& opt = {}) {
  if (opt.retries > 1) throw Error("invalid_config", "at most one judge retry is supported");
  const Endpoint ep = parse_endpoint(endpoint);
  const std::string body = nlohmann::json{{"question", question}, {"answer", answer}, {"reference", reference}}.dump();
  const auto secs = opt.timeout.count() / 1000;
  const auto usecs = (opt.timeout.count() % 1000) * 1000;
  for (unsigned attempt = 0;; ++attempt) {
    httplib::Client cli(ep.base);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    const auto started = std::chrono::steady_clock::now();
    auto res = cli.Post(ep.path, body, "application/json");
    if (res) {
      if (res->status != 200)
        throw JudgeError(JudgeErrorKind::Malformed, "judge answered HTTP " + std::to_string(res->status));
      return parse_judge_response(res->body);
    }
    const auto err = res.error();
    const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                           (err == httplib::Error::Read && std::chrono::steady_clock::now() - started >= opt.timeout);
    if (attempt < opt.retries) continue;
    if (timed_out) throw JudgeError(JudgeErrorKind::Timeout, "judge timed out: " + httplib::to_string(err));
    throw JudgeError(JudgeErrorKind::Network, "judge unreachable: " + httplib::to_string(err));
  }
}

/// The mock's scoring rule: score = 1 + 4 * ROUGE-L rounded to one decimal,
/// accurate iff ROUGE-L >= 0.5.
inline JudgeScore mock_judge_rule(const std::string& answer, const std::string& reference) {
  const double r = rouge_l_text(answer, reference);
  return {std::round((1.0 + 4.0 * r) * 10.0) / 10.0, r >= 0.5};
}

/// Response body for a request body; deterministic and stateless.
inline std::pair<int, std::string> mock_judge_respond(const std::string& request) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(request);
  } catch (const nlohmann::json::exception&) {
    return {400, R"({"error":"request is not JSON"})"};
  }
  if (!j.is_object() || !j.contains("answer") || !j.contains("reference") || !j["answer"].is_string() ||
      !j["reference"].is_string())
    return {400, R"({"error":"answer and reference must be strings"})"};
  const JudgeScore s = mock_judge_rule(j["answer"].get<std::string>(), j["reference"].get<std::string>());
  return {200, nlohmann::json{{"score", s.score}, {"accurate", s.accurate ? 1 : 0}}.dump()};
}

/// Runs the mock judge on 127.0.0.1 in a background thread until destroyed.
/// Port 0 picks a free port.
class MockJudgeServer {
 public:
  explicit MockJudgeServer(int port = 0) : server_(std::make_unique<httplib::Server>()) {
    // No SO_REUSEPORT, so a port another server holds is reported as in use.
    server_->set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof yes);
    });
    server_->Post("/judge", [](const httplib::Request& req, httplib::Response& res) {
      const auto [status, body] = mock_judge_respond(req.body);
      res.status = status;
      res.set_content(body, "application/json");
    });
    if (port == 0) {
      port_ = server_->bind_to_any_port("127.0.0.1");
      if (port_ <= 0) throw Error("port_in_use", "could not bind any port");
    } else {
      if (!server_->bind_to_port("127.0.0.1", port)) throw Error("port_in_use", "port " + std::to_string(port) + " is in use");
      port_ = port;
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
  }

  MockJudgeServer(const MockJudgeServer&) = delete;
  MockJudgeServer& operator=(const MockJudgeServer&) = delete;

  ~MockJudgeServer() {
    server_->stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/judge"; }

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace fmm
