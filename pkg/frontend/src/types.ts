// Wire types mirroring the gateway's JSON responses and event bodies.

export interface ApiEvent {
  seq: number;
  kind: "ACTIVITY_STATUS" | "JOB_STATUS" | "MACHINE_STATUS" | "SENSOR_ARRIVAL";
  body: Record<string, unknown>;
  at: number;
}

export interface JobRecord {
  job_id: string;
  activity_id: string;
  machine_id: string;
  batch_id: string | null;
  status: string;
  nodes: number;
  walltime_req_s: number;
  submitted_at: number | null;
  started_at: number | null;
  ended_at: number | null;
  result_handles: string[];
}

export interface ActivityRecord {
  activity_id: string;
  kind: string;
  status: string;
  workflow_id: string;
  created_at: number;
  updated_at: number;
  metadata: Record<string, string>;
}

export interface MachineRecord {
  machine_id: string;
  name: string;
  scheduler: string;
  total_nodes: number;
  cores_per_node: number;
  available: boolean;
  reliability: number;
}

export interface MachineListing extends MachineRecord {
  reliability_report: { window_polls: number; ok_polls: number; reliability: number };
  wait_estimate: { wait_s: number; ratio_used: number; sample_size: number } | null;
}

export interface SensorArrival {
  envelope_id: string;
  sensor_type: string;
  source_id: string;
  received_at: number;
  payload_uri: string;
}

export interface VizHandoff {
  host: string;
  port: number;
  token: string;
}

export interface WorkflowDoc {
  workflow_id: string;
  kind?: string;
  entry_stage: string;
  stages: { name: string; kind: string }[];
}
