/**
 * Hash-routed explorer: ranking table, unit detail, sample inference strip.
 *
 * All navigation flows through the URL hash so that every screen is a deep
 * link; responses for superseded requests are discarded via a token.
 */

import { ApiClient, Axis, AXES, SampleInfo } from "./api.js";
import { clear, el, errorBanner, fmt } from "./dom.js";
import {
  clampAlpha,
  clampCursor,
  decodeState,
  defaultState,
  encodeState,
  ViewState,
} from "./state.js";
import {
  buildRankingModel,
  buildSampleStrip,
  buildUnitModel,
  TOP_HIGHLIGHT,
} from "./views.js";

const api = new ApiClient();
const root = () => document.getElementById("app") as HTMLElement;

let requestToken = 0;

function navigate(state: ViewState): void {
  window.location.hash = encodeState(state);
}

function currentState(): ViewState {
  return decodeState(window.location.hash);
}

async function render(): Promise<void> {
  const token = ++requestToken;
  const state = currentState();
  const host = root();
  clear(host);
  host.append(header(state));
  const body = el("div", { class: "view" });
  host.append(body);
  try {
    if (state.view === "unit" && state.unit !== null) {
      await renderUnit(body, state, token);
    } else if (state.view === "sample" && state.sampleId !== null) {
      await renderSample(body, state, token);
    } else {
      await renderRanking(body, state, token);
    }
  } catch (error) {
    if (token !== requestToken) return; // superseded request
    clear(body);
    body.append(errorBanner(error instanceof Error ? error.message : String(error), render));
  }
}

function header(state: ViewState): HTMLElement {
  const home = el("a", { href: "#" + encodeState({ ...defaultState(), sortBy: state.sortBy }) }, [
    "unit ranking",
  ]);
  return el("header", {}, [el("h1", {}, ["dissect3d explorer"]), home]);
}

async function renderRanking(body: HTMLElement, state: ViewState, token: number) {
  const payload = await api.getUnits();
  if (token !== requestToken) return;
  const model = buildRankingModel(payload, state.sortBy);

  const toggle = el("button", {}, [
    `sort: ${state.sortBy === "correlation" ? "correlation rank" : "unit index"}`,
  ]);
  toggle.addEventListener("click", () =>
    navigate({ ...state, sortBy: state.sortBy === "correlation" ? "index" : "correlation" }),
  );
  body.append(
    el("p", {}, [
      `${model.rows.length} units, ${model.positiveCount} positive samples, policy ${model.policy} `,
      toggle,
    ]),
  );

  if (model.empty) {
    body.append(el("p", { class: "empty" }, ["no units ranked yet"]));
    return;
  }

  const rows = model.rows.map((row) => {
    const tr = el("tr", { class: row.topTen ? "top-ten" : "" }, [
      el("td", {}, [String(row.rank)]),
      el("td", {}, [`unit ${row.k}`]),
      el("td", {}, [fmt(row.c)]),
      el("td", {}, [row.topTen ? `top ${TOP_HIGHLIGHT}` : ""]),
    ]);
    tr.addEventListener("click", () => navigate({ ...state, view: "unit", unit: row.k }));
    return tr;
  });
  body.append(
    el("table", { class: "ranking" }, [
      el("thead", {}, [
        el("tr", {}, [
          el("th", {}, ["rank"]),
          el("th", {}, ["unit"]),
          el("th", {}, ["correlation"]),
          el("th", {}, [""]),
        ]),
      ]),
      el("tbody", {}, rows),
    ]),
  );
}

async function renderUnit(body: HTMLElement, state: ViewState, token: number) {
  const unit = state.unit as number;
  const [detail, topSamples] = await Promise.all([
    api.getUnit(unit),
    api.getTopSamples(unit, 25),
  ]);
  if (token !== requestToken) return;
  const model = buildUnitModel(detail, topSamples, api, state.alpha);

  body.append(
    el("h2", {}, [`unit ${model.unit}`]),
    el("p", {}, [
      `correlation ${fmt(model.correlation)} (rank ${model.rank}), `,
      `threshold ${fmt(model.threshold, 4)}`,
    ]),
  );
  if (model.caption) {
    body.append(el("p", { class: "caption degenerate" }, [model.caption]));
  }

  body.append(alphaSlider(state));

  const grid = el("div", { class: "collage" });
  for (const cell of model.collage) {
    const img = el("img", { src: cell.url, title: `${cell.sampleId} r=${fmt(cell.relevance)}` });
    img.addEventListener("click", () =>
      navigate({ ...state, view: "sample", sampleId: cell.sampleId }),
    );
    grid.append(img);
  }
  body.append(el("h3", {}, ["top-25 collage (fractured samples)"]), grid);

  body.append(el("h3", {}, ["top-5 samples, slice scrubbers"]));
  for (const scrubber of model.scrubbers) {
    const info = await api.getSample(scrubber.sampleId);
    if (token !== requestToken) return;
    body.append(scrubberRow(state, unit, scrubber.axis, info, scrubber.relevance));
  }
}

function scrubberRow(
  state: ViewState,
  unit: number,
  axis: Axis,
  sample: SampleInfo,
  relevance: number,
): HTMLElement {
  const size = sample.patch_shape ? sample.patch_shape[AXES.indexOf(axis)] : 96;
  const cursor = clampCursor(state.cursor[axis], size);
  const img = el("img", {
    src: api.overlayUrl(sample.sample_id, unit, axis, cursor, state.alpha),
    class: "scrub-view",
  });
  const slider = el("input", {
    type: "range",
    min: "0",
    max: String(size - 1),
    value: String(cursor),
  }) as HTMLInputElement;
  slider.addEventListener("input", () => {
    // swap the src eagerly; the browser discards superseded image loads
    const index = clampCursor(Number(slider.value), size);
    img.src = api.overlayUrl(sample.sample_id, unit, axis, index, state.alpha);
  });
  slider.addEventListener("change", () => {
    const cursorUpdate = { ...state.cursor, [axis]: clampCursor(Number(slider.value), size) };
    navigate({ ...state, cursor: cursorUpdate });
  });
  const label = el("span", {}, [`${sample.sample_id} r=${fmt(relevance)} `]);
  const open = el("a", {
    href: "#" + encodeState({ ...state, view: "sample", sampleId: sample.sample_id }),
  }, ["inference view"]);
  return el("div", { class: "scrubber" }, [label, open, el("br"), img, slider]);
}

async function renderSample(body: HTMLElement, state: ViewState, token: number) {
  const sampleId = state.sampleId as string;
  const [sample, relevance] = await Promise.all([
    api.getSample(sampleId),
    api.getRelevance(sampleId, 10),
  ]);
  if (token !== requestToken) return;
  const model = buildSampleStrip(sample, relevance, api, state.alpha);

  body.append(
    el("h2", {}, [`sample ${model.sampleId}`]),
    el("p", {}, [
      `${sample.vertebra_label}, ${model.fractured ? "fractured" : "not fractured"}, `,
      `predicted probability ${fmt(model.predictedProb, 3)}`,
    ]),
    alphaSlider(state),
  );
  if (model.zeroCaption) {
    body.append(el("p", { class: "caption degenerate" }, [model.zeroCaption]));
  }

  const strip = el("div", { class: "strip" });
  strip.append(
    el("figure", {}, [
      el("img", { src: model.patchUrl }),
      el("figcaption", {}, ["input"]),
    ]),
  );
  for (const cell of model.cells) {
    const fig = el("figure", {}, [
      el("img", { src: cell.overlayUrl }),
      el("figcaption", {}, [
        `unit ${cell.unit}`,
        el("br"),
        `relevance ${cell.relevanceRank} (${fmt(cell.relevance, 2)})`,
        el("br"),
        `corr. rank ${cell.correlationRank}`,
      ]),
    ]);
    fig.addEventListener("click", () =>
      navigate({ ...state, view: "unit", unit: cell.unit }),
    );
    strip.append(fig);
  }
  body.append(strip);
}

function alphaSlider(state: ViewState): HTMLElement {
  const slider = el("input", {
    type: "range",
    min: "0.05",
    max: "1",
    step: "0.05",
    value: String(state.alpha),
  }) as HTMLInputElement;
  slider.addEventListener("change", () =>
    navigate({ ...state, alpha: clampAlpha(Number(slider.value)) }),
  );
  return el("label", { class: "alpha" }, [`overlay alpha ${state.alpha.toFixed(2)} `, slider]);
}

window.addEventListener("hashchange", () => void render());
window.addEventListener("DOMContentLoaded", () => void render());
