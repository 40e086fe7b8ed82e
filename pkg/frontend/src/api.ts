import { SseParser } from "./sse";
import {
  CompaniesSchema,
  type CompanyRow,
  ConversationCreatedSchema,
  type ConversationCreated,
  DeltaPayloadSchema,
  DocumentsSchema,
  type DocumentRow,
  DonePayloadSchema,
  type DonePayload,
  ErrorDetailSchema,
  FilterOptionsSchema,
  type FilterOptions,
  HealthSchema,
  type Health,
  UploadResultSchema,
  type UploadResult,
} from "./types";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

/** The message stream ended (or the connection dropped) before the
 * terminal frame; `partialText` holds whatever was assembled so far. */
export class StreamInterruptedError extends Error {
  constructor(readonly partialText: string) {
    super("answer stream interrupted before the terminal frame");
  }
}

async function errorDetail(res: Response): Promise<string> {
  try {
    return ErrorDetailSchema.parse(await res.json()).detail;
  } catch {
    return res.statusText || `status ${res.status}`;
  }
}

export interface MessageStream {
  text: string;
  done: DonePayload;
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly authToken: string | null = null,
  ) {}

  private headers(json = true): Record<string, string> {
    const h: Record<string, string> = {};
    if (json) h["content-type"] = "application/json";
    if (this.authToken) h["authorization"] = `Bearer ${this.authToken}`;
    return h;
  }

  private async getJson(path: string): Promise<unknown> {
    const res = await fetch(this.baseUrl + path, { headers: this.headers(false) });
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return res.json();
  }

  async health(): Promise<Health> {
    return HealthSchema.parse(await this.getJson("/health"));
  }

  async getFilters(): Promise<FilterOptions> {
    return FilterOptionsSchema.parse(await this.getJson("/filters"));
  }

  async getCompanies(): Promise<CompanyRow[]> {
    return CompaniesSchema.parse(await this.getJson("/companies")).companies;
  }

  async getDocuments(): Promise<DocumentRow[]> {
    return DocumentsSchema.parse(await this.getJson("/documents")).documents;
  }

  async createConversation(title = ""): Promise<ConversationCreated> {
    const res = await fetch(this.baseUrl + "/conversations", {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify({ title }),
    });
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return ConversationCreatedSchema.parse(await res.json());
  }

  async uploadDocument(
    name: string,
    content: Blob | string,
    collection = "filings",
  ): Promise<UploadResult> {
    const blob =
      typeof content === "string" ? new Blob([content], { type: "text/markdown" }) : content;
    const form = new FormData();
    form.append("file", blob, name);
    form.append("collection", collection);
    const res = await fetch(this.baseUrl + "/documents", {
      method: "POST",
      headers: this.headers(false),
      body: form,
    });
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return UploadResultSchema.parse(await res.json());
  }

  /**
   * Post a user message and consume the SSE response. `onDelta` fires for
   * every text frame as it arrives; the resolved value carries the full
   * assembled text plus the terminal payload. Rejects with
   * StreamInterruptedError when the stream dies before the `done` frame.
   */
  async sendMessage(
    conversationId: string,
    text: string,
    onDelta?: (piece: string) => void,
  ): Promise<MessageStream> {
    const res = await fetch(
      this.baseUrl + `/conversations/${encodeURIComponent(conversationId)}/messages`,
      { method: "POST", headers: this.headers(), body: JSON.stringify({ text }) },
    );
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    if (!res.body) throw new StreamInterruptedError("");

    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    let assembled = "";
    try {
      for (;;) {
        const { done, value } = await reader.read();
        const chunk = value ? decoder.decode(value, { stream: !done }) : "";
        for (const frame of parser.push(chunk)) {
          if (frame.event === "delta") {
            const piece = DeltaPayloadSchema.parse(JSON.parse(frame.data)).text;
            assembled += piece;
            onDelta?.(piece);
          } else if (frame.event === "done") {
            const payload = DonePayloadSchema.parse(JSON.parse(frame.data));
            return { text: assembled, done: payload };
          }
        }
        if (done) break;
      }
    } catch (err) {
      if (err instanceof StreamInterruptedError) throw err;
      throw new StreamInterruptedError(assembled);
    }
    throw new StreamInterruptedError(assembled);
  }
}
