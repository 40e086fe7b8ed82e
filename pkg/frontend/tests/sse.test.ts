import { describe, expect, it } from "vitest";
import { SseParser, type SseFrame } from "../src/sse";
import { recorded } from "./mock_server";

function parseWhole(text: string): SseFrame[] {
  return new SseParser().push(text);
}

// deterministic, cheap PRNG so the chunking cases are reproducible
function lcg(seed: number): () => number {
  let s = seed >>> 0;
  return () => {
    s = (s * 1664525 + 1013904223) >>> 0;
    return s / 2 ** 32;
  };
}

describe("SseParser", () => {
  it("parses the recorded answer stream into deltas plus one done frame", () => {
    const frames = parseWhole(recorded.message_answer.sse);
    expect(frames.length).toBeGreaterThan(1);
    expect(frames.at(-1)?.event).toBe("done");
    for (const frame of frames.slice(0, -1)) expect(frame.event).toBe("delta");
    const text = frames
      .slice(0, -1)
      .map((f) => (JSON.parse(f.data) as { text: string }).text)
      .join("");
    expect(text).toBe(recorded.message_answer.persisted_text);
  });

  it("is insensitive to chunk boundaries", () => {
    const whole = parseWhole(recorded.message_answer.sse);
    const rand = lcg(42);
    for (let round = 0; round < 50; round++) {
      const parser = new SseParser();
      const frames: SseFrame[] = [];
      let rest = recorded.message_answer.sse;
      while (rest.length > 0) {
        const n = 1 + Math.floor(rand() * 9);
        frames.push(...parser.push(rest.slice(0, n)));
        rest = rest.slice(n);
      }
      expect(frames).toEqual(whole);
      expect(parser.pending).toBe("");
    }
  });

  it("handles byte-at-a-time delivery", () => {
    const parser = new SseParser();
    const frames: SseFrame[] = [];
    for (const ch of recorded.message_no_answer.sse) frames.push(...parser.push(ch));
    expect(frames).toEqual(parseWhole(recorded.message_no_answer.sse));
  });

  it("joins multi-line data and skips comments", () => {
    const frames = parseWhole(": keepalive\nevent: delta\ndata: one\ndata: two\n\n");
    expect(frames).toEqual([{ event: "delta", data: "one\ntwo" }]);
  });

  it("defaults the event name and tolerates missing data", () => {
    expect(parseWhole("data: x\n\n")).toEqual([{ event: "message", data: "x" }]);
    expect(parseWhole("event: ping\n\n")).toEqual([]);
  });

  it("keeps an unterminated frame pending", () => {
    const parser = new SseParser();
    expect(parser.push("event: delta\ndata: {}")).toEqual([]);
    expect(parser.pending).not.toBe("");
    expect(parser.push("\n\n")).toEqual([{ event: "delta", data: "{}" }]);
  });
});
