// Browser entry point: token prompt, live tables, launch form, detail pane.

import { ConsoleApp } from "./app.js";
import { GatewayClient } from "./client.js";
import { AuthError } from "./sse.js";
import { jobTable, ViewModel } from "./viewmodel.js";

const TOKEN_KEY = "control-api-token";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function fmtTime(epoch: number | null): string {
  if (!epoch) {
    return "-";
  }
  return new Date(epoch * 1000).toISOString().replace("T", " ").slice(0, 19);
}

function renderMachines(vm: ViewModel): string {
  const rows = Object.values(vm.machines)
    .sort((a, b) => a.name.localeCompare(b.name))
    .map((m) => `
      <tr>
        <td>${m.name}</td>
        <td>${m.scheduler}</td>
        <td class="${m.available ? "ok" : "bad"}">${m.available ? "up" : "down"}</td>
        <td>${(m.reliability * 100).toFixed(1)}%</td>
        <td>${m.wait_s === null ? "-" : m.wait_s + " s"}</td>
      </tr>`);
  return rows.join("") || `<tr><td colspan="5" class="muted">no machines yet</td></tr>`;
}

function renderActivities(vm: ViewModel, focused: string | null): string {
  const rows = Object.values(vm.activities)
    .sort((a, b) => b.created_at - a.created_at)
    .map((a) => `
      <tr data-activity="${a.activity_id}" class="${a.activity_id === focused ? "focused" : ""}">
        <td>${a.activity_id}</td>
        <td>${a.kind}</td>
        <td class="status-${a.status}">${a.status}</td>
        <td>${Object.keys(a.jobs).length}</td>
        <td>${fmtTime(a.updated_at)}</td>
      </tr>`);
  return rows.join("") || `<tr><td colspan="5" class="muted">no activities yet</td></tr>`;
}

function renderJobs(vm: ViewModel, activityId: string | null): string {
  if (!activityId) {
    return `<tr><td colspan="7" class="muted">select an activity</td></tr>`;
  }
  const rows = jobTable(vm, activityId).map((j) => `
    <tr>
      <td>${j.job_id}</td>
      <td>${j.batch_id ?? "-"}</td>
      <td class="status-${j.status}">${j.status}</td>
      <td>${j.nodes}</td>
      <td>${fmtTime(j.started_at)}</td>
      <td>${fmtTime(j.ended_at)}</td>
      <td>${j.result_handles.length}</td>
    </tr>`);
  return rows.join("") || `<tr><td colspan="7" class="muted">no jobs yet</td></tr>`;
}

function renderSensors(vm: ViewModel): string {
  const rows = Object.values(vm.sensors)
    .sort((a, b) => b.received_at - a.received_at)
    .map((s) => `
      <tr>
        <td>${s.sensor_type}</td>
        <td>${s.source_id}</td>
        <td>${s.envelope_id}</td>
        <td>${fmtTime(s.received_at)}</td>
      </tr>`);
  return rows.join("") || `<tr><td colspan="4" class="muted">no arrivals yet</td></tr>`;
}

async function boot(): Promise<void> {
  const tokenForm = el<HTMLFormElement>("token-form");
  const dashboard = el<HTMLDivElement>("dashboard");
  const stored = localStorage.getItem(TOKEN_KEY);
  if (stored) {
    el<HTMLInputElement>("token-input").value = stored;
  }

  tokenForm.addEventListener("submit", (e) => {
    e.preventDefault();
    const token = el<HTMLInputElement>("token-input").value.trim();
    localStorage.setItem(TOKEN_KEY, token);
    start(token).catch(showLogin);
  });

  function showLogin(reason?: unknown): void {
    dashboard.hidden = true;
    tokenForm.hidden = false;
    if (reason instanceof AuthError) {
      el<HTMLSpanElement>("token-error").textContent = "token rejected";
    }
  }

  async function start(token: string): Promise<void> {
    const client = new GatewayClient("", token);
    const app = new ConsoleApp(client, render);
    try {
      const workflows = await client.listWorkflows();
      const select = el<HTMLSelectElement>("launch-workflow");
      select.innerHTML = workflows
        .map((w) => `<option value="${w.workflow_id}">${w.workflow_id}</option>`)
        .join("");
      await app.refreshMachines();
    } catch (error) {
      showLogin(error);
      return;
    }
    tokenForm.hidden = true;
    dashboard.hidden = false;

    el<HTMLTableSectionElement>("activities-body").addEventListener("click", (e) => {
      const row = (e.target as HTMLElement).closest("tr[data-activity]");
      if (row) {
        app.focusedActivity = row.getAttribute("data-activity");
        render(app.vm);
      }
    });

    el<HTMLFormElement>("launch-form").addEventListener("submit", async (e) => {
      e.preventDefault();
      const workflowId = el<HTMLSelectElement>("launch-workflow").value;
      let context: Record<string, unknown> = {};
      const rawContext = el<HTMLTextAreaElement>("launch-context").value.trim();
      const errorSpan = el<HTMLSpanElement>("launch-error");
      errorSpan.textContent = "";
      if (rawContext) {
        try {
          context = JSON.parse(rawContext);
        } catch {
          errorSpan.textContent = "context must be a JSON object";
          return;
        }
      }
      const result = await app.launch(workflowId, context);
      if (!result.ok) {
        errorSpan.textContent = `${result.status}: ${result.detail}`;
      }
    });

    el<HTMLButtonElement>("cancel-button").addEventListener("click", async () => {
      if (app.focusedActivity) {
        await app.cancel(app.focusedActivity);
      }
    });

    el<HTMLButtonElement>("viz-button").addEventListener("click", async () => {
      const panel = el<HTMLDivElement>("viz-panel");
      if (!app.focusedActivity) {
        return;
      }
      const handoff = await app.vizHandoff(app.focusedActivity);
      if (!handoff) {
        panel.innerHTML = `<span class="muted">no results yet</span>`;
        return;
      }
      const address = `${handoff.host}:${handoff.port}`;
      panel.innerHTML = `connect your visualizer to <code id="viz-address">${address}</code>
        token <code>${handoff.token}</code>
        <button id="viz-copy">copy</button>`;
      el<HTMLButtonElement>("viz-copy").addEventListener("click", () => {
        void navigator.clipboard.writeText(address);
      });
    });

    setInterval(() => void app.refreshMachines(), 5000);

    function render(vm: ViewModel): void {
      el("machines-body").innerHTML = renderMachines(vm);
      el("activities-body").innerHTML = renderActivities(vm, app.focusedActivity);
      el("jobs-body").innerHTML = renderJobs(vm, app.focusedActivity);
      el("sensors-body").innerHTML = renderSensors(vm);
      el("seq-label").textContent = `event seq ${vm.lastSeq}`;
    }

    render(app.vm);
    app.subscribe().catch(showLogin);
  }

  if (stored) {
    start(stored).catch(showLogin);
  }
}

boot();
