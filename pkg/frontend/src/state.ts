import { ApiClient, ApiError, StreamInterruptedError } from "./api";
import type {
  Citation,
  CompanyRow,
  DocumentRow,
  FilterOptions,
  SourceRef,
  Usage,
} from "./types";

export type TurnStatus = "streaming" | "done" | "failed";

export interface UserTurn {
  role: "user";
  text: string;
}

export interface AssistantTurn {
  role: "assistant";
  text: string;
  status: TurnStatus;
  noAnswer: boolean;
  citations: Citation[];
  sources: SourceRef[];
  usage: Usage | null;
}

export type Turn = UserTurn | AssistantTurn;

export interface ConversationView {
  id: string;
  title: string;
  turns: Turn[];
  inFlight: boolean;
  draft: string;
  // set when the last assistant turn failed; retry() resends it
  failedText: string | null;
}

export interface UploadNotice {
  kind: "success" | "replaced" | "error";
  message: string;
}

type Listener = () => void;

/**
 * All client state, keyed by conversation id. The server never hears about
 * drafts; a turn exists here the moment it is sent, optimistically, and is
 * reconciled by the stream's terminal frame.
 */
export class AppStore {
  readonly conversations = new Map<string, ConversationView>();
  documents: DocumentRow[] = [];
  companies: CompanyRow[] = [];
  filters: FilterOptions | null = null;
  uploadNotice: UploadNotice | null = null;
  uploading = false;

  private listeners: Listener[] = [];

  constructor(private readonly api: ApiClient) {}

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }

  // ---- conversations ----

  async newConversation(title = ""): Promise<ConversationView> {
    const created = await this.api.createConversation(title);
    const view: ConversationView = {
      id: created.conversation_id,
      title: created.title,
      turns: [],
      inFlight: false,
      draft: "",
      failedText: null,
    };
    this.conversations.set(view.id, view);
    this.notify();
    return view;
  }

  setDraft(conversationId: string, text: string): void {
    const view = this.mustGet(conversationId);
    view.draft = text;
    this.notify();
  }

  /**
   * Send one message. Returns false without touching the network when a
   * message is already in flight for this conversation; uploads and other
   * conversations are unaffected.
   */
  async send(conversationId: string, text: string): Promise<boolean> {
    const view = this.mustGet(conversationId);
    if (view.inFlight || !text.trim()) return false;

    view.inFlight = true;
    view.failedText = null;
    view.draft = "";
    view.turns.push({ role: "user", text });
    const assistant: AssistantTurn = {
      role: "assistant",
      text: "",
      status: "streaming",
      noAnswer: false,
      citations: [],
      sources: [],
      usage: null,
    };
    view.turns.push(assistant);
    this.notify();

    try {
      const stream = await this.api.sendMessage(conversationId, text, (piece) => {
        assistant.text += piece;
        this.notify();
      });
      assistant.status = "done";
      assistant.noAnswer = stream.done.no_answer;
      assistant.citations = stream.done.citations;
      assistant.sources = stream.done.sources;
      assistant.usage = stream.done.usage;
      return true;
    } catch (err) {
      assistant.status = "failed";
      if (err instanceof StreamInterruptedError) assistant.text = err.partialText;
      view.failedText = text;
      return false;
    } finally {
      view.inFlight = false;
      this.notify();
    }
  }

  /** Resend the message whose stream failed, replacing the failed bubble. */
  async retry(conversationId: string): Promise<boolean> {
    const view = this.mustGet(conversationId);
    const text = view.failedText;
    if (!text || view.inFlight) return false;
    // drop the failed assistant bubble and its optimistic user bubble;
    // send() recreates both
    const last = view.turns[view.turns.length - 1];
    if (last && last.role === "assistant" && last.status === "failed") {
      view.turns.pop();
      if (view.turns[view.turns.length - 1]?.role === "user") view.turns.pop();
    }
    view.failedText = null;
    return this.send(conversationId, text);
  }

  private mustGet(conversationId: string): ConversationView {
    const view = this.conversations.get(conversationId);
    if (!view) throw new Error(`unknown conversation ${conversationId}`);
    return view;
  }

  // ---- uploads (independent of chat traffic) ----

  async upload(name: string, content: Blob | string, collection = "filings"): Promise<void> {
    const size = typeof content === "string" ? content.length : content.size;
    if (size === 0) {
      this.uploadNotice = { kind: "error", message: "The selected file is empty." };
      this.notify();
      return;
    }
    this.uploading = true;
    this.uploadNotice = null;
    this.notify();
    try {
      const result = await this.api.uploadDocument(name, content, collection);
      this.uploadNotice = result.replaced
        ? { kind: "replaced", message: `Replaced existing document ${result.doc_id}.` }
        : { kind: "success", message: `Indexed ${name} as ${result.doc_id} (${result.chunk_count} chunks).` };
      await this.refreshCatalog();
    } catch (err) {
      const message = err instanceof ApiError ? err.detail : String(err);
      this.uploadNotice = { kind: "error", message };
    } finally {
      this.uploading = false;
      this.notify();
    }
  }

  // ---- catalog and filters ----

  async refreshCatalog(): Promise<void> {
    const [documents, companies, filters] = await Promise.all([
      this.api.getDocuments(),
      this.api.getCompanies(),
      this.api.getFilters(),
    ]);
    this.documents = documents;
    this.companies = companies;
    this.filters = filters;
    this.notify();
  }

  /** Refetch filter options when the cached copy has outlived its TTL.
   * Wired to window focus so pickers rebuilt after a tab switch are fresh. */
  async refreshFiltersIfStale(nowEpochSeconds: number): Promise<boolean> {
    const cached = this.filters;
    if (cached && nowEpochSeconds < cached.fetched_at + cached.ttl) return false;
    this.filters = await this.api.getFilters();
    this.notify();
    return true;
  }

  /** Summary text a source panel shows under a citation, joined from the
   * document catalog; the wire contract carries no excerpt bodies. */
  summaryFor(reportId: string): string {
    return this.documents.find((d) => d.doc_id === reportId)?.metadata.summary ?? "";
  }
}
