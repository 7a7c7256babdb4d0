#pragma once

// Local HTTP server for exercising the real network clients.

#include <functional>
#include <memory>
#include <string>
#include <thread>

#include "httplib.h"

namespace calibrag::testing {

class StubServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  StubServer() : server_(std::make_unique<httplib::Server>()) {}
  ~StubServer() { stop(); }

  void post(const std::string& path, Handler h) { server_->Post(path, std::move(h)); }

  void start() {
    port_ = server_->bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
  }

  void stop() {
    if (thread_.joinable()) {
      server_->stop();
      thread_.join();
    }
  }

  std::string url(const std::string& prefix = "") const {
    return "http://127.0.0.1:" + std::to_string(port_) + prefix;
  }

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace calibrag::testing
