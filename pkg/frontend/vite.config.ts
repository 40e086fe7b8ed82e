import { defineConfig } from "vitest/config";

// One config for both the dev server and the test runner. The proxy keeps
// the browser same-origin with the backend, which serves no CORS headers.
const backend = process.env["FINRAG_BACKEND"] ?? "http://127.0.0.1:8765";

export default defineConfig({
  server: {
    proxy: {
      "/health": backend,
      "/filters": backend,
      "/companies": backend,
      "/documents": backend,
      "/conversations": backend,
    },
  },
  test: {
    environment: "node",
    include: ["tests/**/*.test.ts"],
    testTimeout: 15000,
  },
});
