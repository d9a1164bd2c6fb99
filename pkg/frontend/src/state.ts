/**
 * View state and its URL form.
 *
 * The full state round-trips through the location hash, so any view is
 * deep-linkable and back/forward restore exactly what was on screen.
 */

import { Axis, AXES } from "./api.js";

export type ViewName = "ranking" | "unit" | "sample";
export type SortMode = "correlation" | "index";

export interface ViewState {
  view: ViewName;
  sampleId: string | null;
  unit: number | null;
  cursor: Record<Axis, number>;
  alpha: number;
  sortBy: SortMode;
}

export const ALPHA_MIN = 0.05;
export const ALPHA_MAX = 1.0;

export function clampAlpha(alpha: number): number {
  if (!Number.isFinite(alpha)) return 0.5;
  return Math.min(ALPHA_MAX, Math.max(ALPHA_MIN, alpha));
}

export function clampCursor(value: number, size: number): number {
  if (!Number.isFinite(value)) return Math.floor(size / 2);
  return Math.min(size - 1, Math.max(0, Math.round(value)));
}

export function defaultState(): ViewState {
  return {
    view: "ranking",
    sampleId: null,
    unit: null,
    cursor: { sagittal: 48, coronal: 48, axial: 48 },
    alpha: 0.5,
    sortBy: "correlation",
  };
}

export function encodeState(state: ViewState): string {
  const params = new URLSearchParams();
  params.set("view", state.view);
  if (state.sampleId !== null) params.set("sample", state.sampleId);
  if (state.unit !== null) params.set("unit", String(state.unit));
  for (const axis of AXES) params.set(axis.slice(0, 3), String(state.cursor[axis]));
  params.set("alpha", state.alpha.toFixed(2));
  params.set("sort", state.sortBy);
  return params.toString();
}

export function decodeState(hash: string): ViewState {
  const params = new URLSearchParams(hash.startsWith("#") ? hash.slice(1) : hash);
  const state = defaultState();

  const view = params.get("view");
  if (view === "ranking" || view === "unit" || view === "sample") state.view = view;

  const sample = params.get("sample");
  if (sample) state.sampleId = sample;

  const unit = params.get("unit");
  if (unit !== null && unit !== "" && Number.isInteger(Number(unit)) && Number(unit) >= 0) {
    state.unit = Number(unit);
  }

  for (const axis of AXES) {
    const raw = params.get(axis.slice(0, 3));
    if (raw !== null && Number.isFinite(Number(raw))) {
      state.cursor[axis] = Math.max(0, Math.round(Number(raw)));
    }
  }

  const alpha = params.get("alpha");
  if (alpha !== null) state.alpha = clampAlpha(Number(alpha));

  const sort = params.get("sort");
  if (sort === "correlation" || sort === "index") state.sortBy = sort;

  return state;
}
