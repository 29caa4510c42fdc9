// Mirrors of the gateway's JSON payloads. The server is authoritative for
// every field; the UI never recomputes outcome, narrative, flags, or stats.

export interface WorklistEntry {
  study_uid: string;
  pseudonym: string;
  state: string;
  assigned_reader: string | null;
  waiting_since: string;
  second_opinion: boolean;
  modality: string;
  study_date: string;
  instance_count: number;
  read_count: number;
}

export interface InstanceRef {
  series_uid: string;
  sop_uid: string;
}

export interface Nodule {
  lobe: string;
  composition: string;
  mean_diameter_mm: number;
}

export interface Protocol {
  protocol_id: string;
  study_uid: string;
  pseudonym: string;
  reader_id: string;
  nodules: Nodule[];
  lungrads_category: string;
  outcome: string;
  narrative: string;
  is_second_opinion: boolean;
  is_final: boolean;
  created_at: string;
}

export interface StudyDetail {
  study_uid: string;
  pseudonym: string;
  modality: string;
  study_date: string;
  instance_count: number;
  first_ready_at: string;
  second_opinion_expert: string | null;
  protocols: Protocol[];
  instances: InstanceRef[];
}

export interface TimelineEntry {
  kind: string;
  at: string;
  detail: Record<string, unknown>;
}

export interface TimelineResponse {
  pseudonym: string;
  state: string;
  entries: TimelineEntry[];
}

export interface Stats {
  cases_total: number;
  by_state: Record<string, number>;
  finalized_studies: number;
  by_category: Record<string, number>;
  by_outcome: Record<string, number>;
  second_opinion_rate: number;
  mean_turnaround_hours: number | null;
  open_contact_tasks: number;
}

export interface ContactTask {
  task_id: string;
  pseudonym: string;
  study_uid: string;
  status: string;
  reason: string;
  created_at: string;
  closed_at: string | null;
  note: string | null;
}

export interface ErrorEnvelope {
  error: {
    http_status: number;
    code: string;
    message: string;
    detail: Record<string, unknown>;
  };
}

export interface ProtocolDraft {
  reader_id: string;
  lungrads_category: string;
  nodules: Nodule[];
  finalize: boolean;
}
