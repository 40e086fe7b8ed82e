import { z } from "zod";

// Wire types, mirrored 1:1 from the backend's JSON payloads. Everything the
// app renders passes through these schemas first, so a contract drift fails
// loudly instead of rendering garbage.

export const CitationSchema = z.object({
  marker: z.number().int(),
  report_id: z.string(),
  excerpt_id: z.number().int(),
});
export type Citation = z.infer<typeof CitationSchema>;

export const SourceRefSchema = z.object({
  marker: z.number().int(),
  report_id: z.string(),
  title: z.string(),
  company: z.string(),
  date: z.string(),
  report_type: z.string(),
});
export type SourceRef = z.infer<typeof SourceRefSchema>;

export const UsageSchema = z.object({
  input_tokens: z.number().int(),
  output_tokens: z.number().int(),
  model_id: z.string(),
  cost_usd: z.number(),
});
export type Usage = z.infer<typeof UsageSchema>;

export const DeltaPayloadSchema = z.object({ text: z.string() });

export const DonePayloadSchema = z.object({
  conversation_id: z.string(),
  no_answer: z.boolean(),
  citations: z.array(CitationSchema),
  sources: z.array(SourceRefSchema),
  usage: UsageSchema,
});
export type DonePayload = z.infer<typeof DonePayloadSchema>;

export const ReportMetadataSchema = z.object({
  title: z.string(),
  company_name: z.string(),
  keywords: z.array(z.string()),
  summary: z.string(),
  date: z.string().nullable(),
  report_type: z.string(),
});
export type ReportMetadata = z.infer<typeof ReportMetadataSchema>;

export const UploadResultSchema = z.object({
  doc_id: z.string(),
  metadata: ReportMetadataSchema,
  chunk_count: z.number().int(),
  flagged: z.boolean(),
  replaced: z.boolean(),
});
export type UploadResult = z.infer<typeof UploadResultSchema>;

export const ConversationCreatedSchema = z.object({
  conversation_id: z.string(),
  title: z.string(),
  created_at: z.string(),
});
export type ConversationCreated = z.infer<typeof ConversationCreatedSchema>;

export const FilterOptionsSchema = z.object({
  companies: z.array(z.string()),
  report_types: z.array(z.string()),
  date_min: z.string().nullable(),
  date_max: z.string().nullable(),
  fetched_at: z.number(),
  ttl: z.number(),
});
export type FilterOptions = z.infer<typeof FilterOptionsSchema>;

export const CompanyRowSchema = z.object({
  name: z.string(),
  document_count: z.number().int(),
  report_types: z.array(z.string()),
  date_min: z.string().nullable(),
  date_max: z.string().nullable(),
});
export const CompaniesSchema = z.object({ companies: z.array(CompanyRowSchema) });
export type CompanyRow = z.infer<typeof CompanyRowSchema>;

export const DocumentRowSchema = z.object({
  doc_id: z.string(),
  source_name: z.string(),
  collection: z.string(),
  ingested_at: z.string(),
  flagged: z.boolean(),
  chunk_count: z.number().int(),
  metadata: ReportMetadataSchema,
});
export const DocumentsSchema = z.object({ documents: z.array(DocumentRowSchema) });
export type DocumentRow = z.infer<typeof DocumentRowSchema>;

export const HealthSchema = z.object({
  status: z.enum(["ok", "degraded"]),
  version: z.string(),
  documents: z.number().int(),
  chunks: z.number().int(),
  provider: z.object({
    name: z.string(),
    embedder: z.string(),
    reachable: z.boolean(),
  }),
});
export type Health = z.infer<typeof HealthSchema>;

export const ErrorDetailSchema = z.object({ detail: z.string() });
