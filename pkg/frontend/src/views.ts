/**
 * Pure view-model builders.
 *
 * These functions turn API payloads into exactly what the DOM layer shows.
 * They reorder and annotate but never compute a score, rank, or threshold,
 * so every displayed number can be traced to an API payload field.
 */

import {
  ApiClient,
  Axis,
  RankingPayload,
  RelevancePayload,
  SampleInfo,
  TopSamplesPayload,
  UnitDetail,
  UnitRow,
} from "./api.js";
import { SortMode } from "./state.js";

export const DEGENERATE_CAPTION = "no statistically significant activations";
export const TOP_HIGHLIGHT = 10;

export interface RankingRowModel extends UnitRow {
  topTen: boolean;
}

export interface RankingModel {
  policy: string;
  positiveCount: number;
  rows: RankingRowModel[];
  empty: boolean;
}

export function buildRankingModel(
  payload: RankingPayload,
  sortBy: SortMode,
): RankingModel {
  const rows = payload.units.map((u) => ({ ...u, topTen: u.rank <= TOP_HIGHLIGHT }));
  if (sortBy === "index") {
    rows.sort((a, b) => a.k - b.k); // stable: rank order preserved within equal k
  } else {
    rows.sort((a, b) => a.rank - b.rank);
  }
  return {
    policy: payload.policy,
    positiveCount: payload.positive_count,
    rows,
    empty: rows.length === 0,
  };
}

export interface CollageCell {
  sampleId: string;
  relevance: number;
  url: string;
}

export interface ScrubberModel {
  sampleId: string;
  relevance: number;
  axis: Axis;
  /** chosen slice on the activation grid; the initial scrubber position */
  nativeIndex: number;
  chosenUrl: string;
}

export interface UnitViewModel {
  unit: number;
  rank: number;
  correlation: number;
  threshold: number;
  degenerate: boolean;
  caption: string | null;
  collage: CollageCell[];
  scrubbers: ScrubberModel[];
}

export function buildUnitModel(
  detail: UnitDetail,
  topSamples: TopSamplesPayload,
  api: ApiClient,
  alpha: number,
  scrubberCount = 5,
): UnitViewModel {
  const degenerate = topSamples.samples.every((s) => s.relevance === 0);
  const collage = topSamples.samples.slice(0, 25).map((s) => ({
    sampleId: s.sample_id,
    relevance: s.relevance,
    url: api.overlayUrl(s.sample_id, detail.k, s.slice.axis, s.slice.index, alpha, true),
  }));
  const scrubbers = topSamples.samples.slice(0, scrubberCount).map((s) => ({
    sampleId: s.sample_id,
    relevance: s.relevance,
    axis: s.slice.axis,
    nativeIndex: s.slice.index,
    chosenUrl: api.overlayUrl(s.sample_id, detail.k, s.slice.axis, s.slice.index, alpha, true),
  }));
  return {
    unit: detail.k,
    rank: detail.rank,
    correlation: detail.c,
    threshold: detail.threshold,
    degenerate,
    caption: degenerate ? DEGENERATE_CAPTION : null,
    collage,
    scrubbers,
  };
}

export interface StripCell {
  unit: number;
  relevanceRank: number;
  relevance: number;
  correlationRank: number;
  overlayUrl: string;
}

export interface SampleStripModel {
  sampleId: string;
  predictedProb: number | null;
  fractured: boolean;
  patchUrl: string;
  cells: StripCell[];
  zeroRelevance: boolean;
  zeroCaption: string | null;
}

export function buildSampleStrip(
  sample: SampleInfo,
  relevance: RelevancePayload,
  api: ApiClient,
  alpha: number,
  inputAxis: Axis = "sagittal",
  inputIndex = 48,
): SampleStripModel {
  // rows arrive already ordered by relevance rank; preserve them verbatim
  const cells = relevance.rows.map((row) => ({
    unit: row.unit,
    relevanceRank: row.relevance_rank,
    relevance: row.relevance,
    correlationRank: row.correlation_rank,
    overlayUrl: api.overlayUrl(
      relevance.sample_id, row.unit, row.slice.axis, row.slice.index, alpha, true,
    ),
  }));
  const zeroRelevance = cells.length > 0 && cells.every((c) => c.relevance === 0);
  return {
    sampleId: sample.sample_id,
    predictedProb: sample.predicted_prob,
    fractured: sample.fractured,
    patchUrl: api.patchUrl(sample.sample_id, inputAxis, inputIndex),
    cells,
    zeroRelevance,
    zeroCaption: zeroRelevance ? "no unit produced superthreshold activation" : null,
  };
}
