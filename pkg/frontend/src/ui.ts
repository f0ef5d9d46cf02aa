import { MixturePanel, PanelState, ALPHA_MIN, ALPHA_MAX, ALPHA_STEP } from "./panel.js";

// Thin DOM binding: all decisions live in MixturePanel; this file only
// mirrors PanelState into elements and forwards input events.

export function mount(root: HTMLElement, panel: MixturePanel): void {
  root.innerHTML = `
    <div class="banner" hidden>
      <span class="banner-text"></span>
      <button class="retry">retry</button>
    </div>
    <div class="empty" hidden>no adapters registered</div>
    <div class="sliders"></div>
    <label>source text
      <input class="text" type="text" spellcheck="false"
             placeholder="w003 w007 w001">
    </label>
    <div class="output">
      <div class="translation"></div>
      <div class="hashes">
        <code class="mixture-hash"></code>
        <code class="base-hash"></code>
      </div>
    </div>
    <div class="toast" hidden></div>
  `;

  const el = <T extends HTMLElement>(sel: string): T =>
    root.querySelector(sel) as T;

  el<HTMLButtonElement>(".retry").addEventListener("click", () => {
    void panel.load();
  });
  el<HTMLInputElement>(".text").addEventListener("input", (ev) => {
    panel.setText((ev.target as HTMLInputElement).value);
  });

  let toastTimer: ReturnType<typeof setTimeout> | undefined;
  const showToast = (message: string) => {
    const toast = el<HTMLDivElement>(".toast");
    toast.textContent = message;
    toast.hidden = false;
    if (toastTimer !== undefined) clearTimeout(toastTimer);
    toastTimer = setTimeout(() => {
      toast.hidden = true;
    }, 4000);
  };

  const render = (state: PanelState) => {
    const banner = el<HTMLDivElement>(".banner");
    banner.hidden = state.banner === null;
    el<HTMLSpanElement>(".banner-text").textContent = state.banner ?? "";
    el<HTMLDivElement>(".empty").hidden =
      !(state.emptyRegistry && state.banner === null);

    const holder = el<HTMLDivElement>(".sliders");
    for (const s of state.sliders) {
      let row = holder.querySelector<HTMLDivElement>(
        `[data-id="${s.id}"]`);
      if (!row) {
        row = document.createElement("div");
        row.className = "slider-row";
        row.dataset.id = s.id;
        row.innerHTML = `
          <span class="label"></span>
          <input type="range" min="${ALPHA_MIN}" max="${ALPHA_MAX}"
                 step="${ALPHA_STEP}">
          <span class="value"></span>
          <span class="lambda"></span>
        `;
        const input = row.querySelector("input")!;
        input.addEventListener("input", () => {
          panel.setSlider(s.id, Number(input.value));
        });
        holder.appendChild(row);
      }
      row.querySelector(".label")!.textContent =
        `${s.taskName} (rank ${s.rank}, ${s.paramCount} params)`;
      const input = row.querySelector("input")!;
      input.value = String(s.value);
      row.querySelector(".value")!.textContent = s.value.toFixed(2);
      row.querySelector(".lambda")!.textContent = `λ=${s.lambda}`;
      row.classList.toggle("warning", s.warning);
    }

    el<HTMLDivElement>(".translation").textContent = state.translation;
    el<HTMLElement>(".mixture-hash").textContent =
      state.translationHash ? `mixture ${state.translationHash}` : "";
    el<HTMLElement>(".base-hash").textContent =
      state.baseHash ? `base ${state.baseHash}` : "";
    root.classList.toggle("pending", state.pendingDebounce);
  };

  panel.setHooks({ onChange: render, onToast: showToast });
  render(panel.state());
}
