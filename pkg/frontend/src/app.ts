// DOM-free console orchestration: owns the ViewModel, feeds it events, and
// exposes the actions the UI binds to.  Kept separate from rendering so
// the behaviour is testable without a browser.

import type { GatewayClient, LaunchResult } from "./client.js";
import type { ApiEvent, VizHandoff } from "./types.js";
import { applyEvent, emptyViewModel, ViewModel } from "./viewmodel.js";

export class ConsoleApp {
  vm: ViewModel = emptyViewModel();
  focusedActivity: string | null = null;

  constructor(
    private client: GatewayClient,
    private onChange: (vm: ViewModel) => void = () => {},
  ) {}

  /** Apply one event and notify the renderer; the UI therefore reflects
   * every transition within a single event delivery. */
  handleEvent(event: ApiEvent): void {
    applyEvent(this.vm, event);
    this.onChange(this.vm);
  }

  async refreshMachines(): Promise<void> {
    for (const machine of await this.client.listMachines()) {
      const existing = this.vm.machines[machine.name];
      this.vm.machines[machine.name] = {
        ...machine,
        wait_s: machine.wait_estimate ? machine.wait_estimate.wait_s : null,
      };
      void existing;
    }
    this.onChange(this.vm);
  }

  /** Connect to the live feed, replaying everything from seq 0 so the
   * model is rebuilt purely from events. */
  subscribe(signal?: AbortSignal): Promise<void> {
    return this.client.streamEvents(this.vm.lastSeq, (event) =>
      this.handleEvent(event), signal);
  }

  async launch(
    workflowId: string,
    context: Record<string, unknown>,
  ): Promise<LaunchResult> {
    const result = await this.client.launchActivity(workflowId, context);
    if (result.ok && result.activityId) {
      this.focusedActivity = result.activityId;
      this.onChange(this.vm);
    }
    return result;
  }

  async cancel(activityId: string): Promise<boolean> {
    return this.client.cancelActivity(activityId);
  }

  async vizHandoff(activityId: string): Promise<VizHandoff | null> {
    return this.client.vizHandoff(activityId);
  }
}
