// The console's single source of displayed truth.
//
// Every value in the ViewModel comes from a gateway response or event;
// nothing is fabricated client-side.  Event application is deterministic:
// replaying the same event log into a fresh ViewModel reconstructs the
// same state, and events at or below `lastSeq` are ignored so a reconnect
// that replays overlap never duplicates or regresses anything.

import type {
  ActivityRecord,
  ApiEvent,
  JobRecord,
  MachineRecord,
  SensorArrival,
} from "./types.js";

export interface ActivityView extends ActivityRecord {
  jobs: Record<string, JobRecord>;
}

export interface MachineView extends MachineRecord {
  wait_s: number | null; // from GET /api/machines, not from events
}

export interface ViewModel {
  lastSeq: number;
  machines: Record<string, MachineView>;
  activities: Record<string, ActivityView>;
  sensors: Record<string, SensorArrival>; // latest envelope per type
}

export function emptyViewModel(): ViewModel {
  return { lastSeq: 0, machines: {}, activities: {}, sensors: {} };
}

export function applyEvent(vm: ViewModel, event: ApiEvent): ViewModel {
  if (event.seq <= vm.lastSeq) {
    return vm; // duplicate or stale (reconnect overlap)
  }
  vm.lastSeq = event.seq;
  switch (event.kind) {
    case "ACTIVITY_STATUS": {
      const record = event.body as unknown as ActivityRecord;
      const existing = vm.activities[record.activity_id];
      vm.activities[record.activity_id] = {
        ...record,
        jobs: existing ? existing.jobs : {},
      };
      break;
    }
    case "JOB_STATUS": {
      const job = event.body as unknown as JobRecord;
      const activity = vm.activities[job.activity_id];
      if (activity) {
        activity.jobs[job.job_id] = job;
      } else {
        // job event observed before its activity event: hold a stub
        vm.activities[job.activity_id] = {
          activity_id: job.activity_id,
          kind: "",
          status: "",
          workflow_id: "",
          created_at: 0,
          updated_at: 0,
          metadata: {},
          jobs: { [job.job_id]: job },
        };
      }
      break;
    }
    case "MACHINE_STATUS": {
      const machine = event.body as unknown as MachineRecord;
      const existing = vm.machines[machine.name];
      vm.machines[machine.name] = {
        ...machine,
        wait_s: existing ? existing.wait_s : null,
      };
      break;
    }
    case "SENSOR_ARRIVAL": {
      const envelope = event.body as unknown as SensorArrival;
      vm.sensors[envelope.sensor_type] = envelope;
      break;
    }
  }
  return vm;
}

export function replay(events: ApiEvent[], vm?: ViewModel): ViewModel {
  const model = vm ?? emptyViewModel();
  for (const event of events) {
    applyEvent(model, event);
  }
  return model;
}

export function jobTable(vm: ViewModel, activityId: string): JobRecord[] {
  const activity = vm.activities[activityId];
  if (!activity) {
    return [];
  }
  return Object.values(activity.jobs).sort((a, b) =>
    a.job_id < b.job_id ? -1 : a.job_id > b.job_id ? 1 : 0,
  );
}
