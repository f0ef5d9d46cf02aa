import { AdapterInfo, ApiError, Client, MixtureComponent } from "./api.js";
import { debounce, Debounced } from "./debounce.js";

export const ALPHA_MIN = -2;
export const ALPHA_MAX = 2;
export const ALPHA_STEP = 0.05;

export interface SliderModel {
  id: string;
  taskName: string;
  rank: number;
  paramCount: number;
  lambda: number;
  value: number;        // pending edit or last acknowledged value, never stale
  acknowledged: number;
  warning: boolean;     // negative alpha extrapolates away from the domain
}

export interface PanelState {
  sliders: SliderModel[];
  emptyRegistry: boolean;
  banner: string | null;       // connection failure; retry via load()
  pendingDebounce: boolean;
  mixtureHash: string | null;  // last acknowledged PUT
  baseHash: string | null;
  text: string;
  translation: string;
  translationHash: string | null;  // hash the shown translation was made under
}

export interface PanelHooks {
  onChange?: (state: PanelState) => void;
  onToast?: (message: string) => void;
}

function snap(raw: number): number {
  const clamped = Math.min(ALPHA_MAX, Math.max(ALPHA_MIN, raw));
  // snap to the 0.05 grid, then to 2 decimals to kill float residue
  // like 0.35000000000000003
  const snapped = Math.round(clamped / ALPHA_STEP) * ALPHA_STEP;
  return Math.round(snapped * 100) / 100;
}

export class MixturePanel {
  private sliders: SliderModel[] = [];
  private emptyRegistry = false;
  private banner: string | null = null;
  private pendingDebounce = false;
  private mixtureHash: string | null = null;
  private baseHash: string | null = null;
  private text = "";
  private translation = "";
  private translationHash: string | null = null;

  private commitDebounced: Debounced<[]>;
  private translateDebounced: Debounced<[]>;
  private putInFlight = false;
  private putDirty = false;
  private translateController: AbortController | null = null;

  constructor(
    private client: Client,
    private hooks: PanelHooks = {},
    debounceMs = 150,
  ) {
    this.commitDebounced = debounce(() => void this.commit(), debounceMs);
    this.translateDebounced = debounce(() => void this.retranslate(), debounceMs);
  }

  setHooks(hooks: PanelHooks): void {
    this.hooks = hooks;
  }

  state(): PanelState {
    return {
      sliders: this.sliders.map((s) => ({ ...s })),
      emptyRegistry: this.emptyRegistry,
      banner: this.banner,
      pendingDebounce: this.pendingDebounce,
      mixtureHash: this.mixtureHash,
      baseHash: this.baseHash,
      text: this.text,
      translation: this.translation,
      translationHash: this.translationHash,
    };
  }

  private notify(): void {
    this.hooks.onChange?.(this.state());
  }

  async load(): Promise<void> {
    this.banner = null;
    this.notify();
    let adapters: AdapterInfo[];
    try {
      const health = await this.client.health();
      this.baseHash = health.base_hash;
      adapters = await this.client.getAdapters();
    } catch (err) {
      this.banner = err instanceof Error ? err.message : "service unreachable";
      this.notify();
      return;
    }
    this.sliders = adapters.map((a) => ({
      id: a.id,
      taskName: a.task_name,
      rank: a.rank,
      paramCount: a.param_count,
      lambda: a.default_lambda,
      value: 0,
      acknowledged: 0,
      warning: false,
    }));
    this.emptyRegistry = adapters.length === 0;
    this.notify();
  }

  setSlider(id: string, raw: number): void {
    const slider = this.sliders.find((s) => s.id === id);
    if (!slider) return;
    slider.value = snap(raw);
    slider.warning = slider.value < 0;
    this.pendingDebounce = true;
    this.notify();
    this.commitDebounced();
  }

  setText(text: string): void {
    this.text = text;
    this.notify();
    this.translateDebounced();
  }

  private components(): MixtureComponent[] {
    return this.sliders.map((s) => ({
      id: s.id,
      alpha: s.value,
      lambda: s.lambda,
    }));
  }

  // One PUT in flight at most; edits made while it runs trigger another
  // commit with the then-newest values once it settles.
  private async commit(): Promise<void> {
    if (this.sliders.length === 0) {
      this.pendingDebounce = false;
      this.notify();
      return;
    }
    if (this.putInFlight) {
      this.putDirty = true;
      return;
    }
    this.putInFlight = true;
    const sent = this.components();
    try {
      const ack = await this.client.putMixture(sent);
      for (const s of this.sliders) {
        const c = sent.find((x) => x.id === s.id)!;
        s.acknowledged = c.alpha;
      }
      this.mixtureHash = ack.mixture_hash;
      this.pendingDebounce = this.putDirty;
      this.notify();
      if (this.text.trim() !== "") void this.retranslate();
    } catch (err) {
      // revert to the last acknowledged state; drop superseding edits too,
      // since they were edits on top of a state the service never accepted
      this.commitDebounced.cancel();
      this.putDirty = false;
      for (const s of this.sliders) {
        s.value = s.acknowledged;
        s.warning = s.value < 0;
      }
      this.pendingDebounce = false;
      this.toastError(err);
      this.notify();
    } finally {
      this.putInFlight = false;
    }
    if (this.putDirty) {
      this.putDirty = false;
      await this.commit();
    }
  }

  // One translate in flight at most; a newer request aborts the older one so
  // the shown (translation, hash) pair always comes from a single response.
  private async retranslate(): Promise<void> {
    if (this.text.trim() === "") {
      this.translation = "";
      this.translationHash = null;
      this.notify();
      return;
    }
    this.translateController?.abort();
    const controller = new AbortController();
    this.translateController = controller;
    try {
      const res = await this.client.translate(this.text, controller.signal);
      if (controller !== this.translateController) return; // superseded
      this.translation = res.translation;
      this.translationHash = res.mixture_hash;
      this.notify();
    } catch (err) {
      if (controller !== this.translateController) return;
      if (err instanceof DOMException && err.name === "AbortError") return;
      this.toastError(err);
    }
  }

  private toastError(err: unknown): void {
    if (err instanceof ApiError) {
      this.hooks.onToast?.(err.message);
    } else if (err instanceof Error) {
      this.hooks.onToast?.(err.message);
    } else {
      this.hooks.onToast?.("request failed");
    }
  }
}
