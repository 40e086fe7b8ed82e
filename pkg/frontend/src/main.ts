import { ApiClient } from "./api";
import { escapeHtml, renderTurnHtml } from "./render";
import { AppStore } from "./state";

const store = new AppStore(new ApiClient(""));
let currentId: string | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const threadEl = el<HTMLDivElement>("thread");
const listEl = el<HTMLElement>("conversation-list");
const composerForm = el<HTMLFormElement>("composer-form");
const composerInput = el<HTMLInputElement>("composer-input");
const sendButton = el<HTMLButtonElement>("send-button");
const uploadInput = el<HTMLInputElement>("upload-input");
const uploadNotice = el<HTMLDivElement>("upload-notice");
const companySelect = el<HTMLSelectElement>("filter-company");
const typeSelect = el<HTMLSelectElement>("filter-type");
const documentsBody = el<HTMLTableSectionElement>("documents-body");
const healthBadge = el<HTMLSpanElement>("health-badge");

function current() {
  return currentId ? (store.conversations.get(currentId) ?? null) : null;
}

function renderThread(): void {
  const view = current();
  if (!view) {
    threadEl.innerHTML = "";
    sendButton.disabled = true;
    return;
  }
  const summaryFor = (reportId: string) => store.summaryFor(reportId);
  threadEl.innerHTML = view.turns.map((t, i) => renderTurnHtml(t, i, summaryFor)).join("");
  sendButton.disabled = view.inFlight;
  if (view.inFlight) threadEl.scrollTop = threadEl.scrollHeight;
}

function renderConversationList(): void {
  const items: string[] = [];
  for (const view of store.conversations.values()) {
    const label = view.title || view.turns.find((t) => t.role === "user")?.text || "New chat";
    const active = view.id === currentId ? " class=\"active\"" : "";
    items.push(
      `<button type="button" data-conv="${view.id}"${active}>${escapeHtml(label)}</button>`,
    );
  }
  listEl.innerHTML = items.join("");
}

function renderSelect(select: HTMLSelectElement, values: string[], blankLabel: string): void {
  const kept = select.value;
  const options = [`<option value="">${escapeHtml(blankLabel)}</option>`];
  for (const v of values) {
    options.push(`<option value="${escapeHtml(v)}">${escapeHtml(v)}</option>`);
  }
  select.innerHTML = options.join("");
  if (values.includes(kept)) select.value = kept;
}

function renderCatalog(): void {
  renderSelect(companySelect, store.filters?.companies ?? [], "All companies");
  renderSelect(typeSelect, store.filters?.report_types ?? [], "All types");
  const company = companySelect.value;
  const type = typeSelect.value;
  const rows: string[] = [];
  for (const doc of store.documents) {
    if (company && doc.metadata.company_name !== company) continue;
    if (type && doc.metadata.report_type !== type) continue;
    rows.push(
      `<tr><td>${escapeHtml(doc.metadata.title || doc.source_name)}</td>` +
        `<td>${escapeHtml(doc.metadata.company_name)}</td>` +
        `<td>${escapeHtml(doc.metadata.date ?? "")}</td>` +
        `<td>${doc.chunk_count}</td></tr>`,
    );
  }
  documentsBody.innerHTML = rows.join("");
}

function renderUploadNotice(): void {
  const notice = store.uploadNotice;
  uploadNotice.hidden = !notice && !store.uploading;
  if (store.uploading) {
    uploadNotice.className = "";
    uploadNotice.textContent = "Uploading…";
  } else if (notice) {
    uploadNotice.className = notice.kind;
    uploadNotice.textContent = notice.message;
  }
}

function render(): void {
  renderConversationList();
  renderThread();
  renderCatalog();
  renderUploadNotice();
}

async function switchTo(conversationId: string): Promise<void> {
  currentId = conversationId;
  composerInput.value = current()?.draft ?? "";
  render();
}

async function startConversation(): Promise<void> {
  const view = await store.newConversation();
  await switchTo(view.id);
}

composerForm.addEventListener("submit", (e) => {
  e.preventDefault();
  const text = composerInput.value;
  if (!currentId || !text.trim()) return;
  composerInput.value = "";
  void store.send(currentId, text);
});

composerInput.addEventListener("input", () => {
  if (currentId) store.setDraft(currentId, composerInput.value);
});

threadEl.addEventListener("click", (e) => {
  const target = e.target as HTMLElement;
  if (target.closest("[data-retry]")) {
    if (currentId) void store.retry(currentId);
    return;
  }
  const cite = target.closest("a.cite");
  if (cite instanceof HTMLAnchorElement) {
    e.preventDefault();
    const card = document.getElementById(cite.hash.slice(1));
    card?.scrollIntoView({ behavior: "smooth", block: "center" });
  }
});

listEl.addEventListener("click", (e) => {
  const button = (e.target as HTMLElement).closest("button[data-conv]");
  const id = button?.getAttribute("data-conv");
  if (id) void switchTo(id);
});

el<HTMLButtonElement>("new-conversation").addEventListener("click", () => {
  void startConversation();
});

uploadInput.addEventListener("change", () => {
  const file = uploadInput.files?.[0];
  uploadInput.value = "";
  if (file) void store.upload(file.name, file);
});

companySelect.addEventListener("change", renderCatalog);
typeSelect.addEventListener("change", renderCatalog);

// pickers rebuilt after a tab switch must not show stale options
window.addEventListener("focus", () => {
  void store.refreshFiltersIfStale(Date.now() / 1000);
});

async function init(): Promise<void> {
  store.subscribe(render);
  try {
    const health = await new ApiClient("").health();
    healthBadge.textContent = `${health.status} · ${health.documents} docs`;
    healthBadge.className = health.status;
  } catch {
    healthBadge.textContent = "backend unreachable";
    healthBadge.className = "degraded";
  }
  await store.refreshCatalog().catch(() => undefined);
  await startConversation().catch(() => undefined);
  render();
}

void init();
