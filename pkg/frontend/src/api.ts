/**
 * Typed client over the read-only explorer API.
 *
 * The client only fetches and parses; it never derives a score or rank.
 * Every number shown in the UI travels through these payload types verbatim.
 */

export type Axis = "sagittal" | "coronal" | "axial";
export const AXES: Axis[] = ["sagittal", "coronal", "axial"];

export interface UnitRow {
  k: number;
  c: number;
  rank: number;
}

export interface RankingPayload {
  policy: string;
  positive_count: number;
  units: UnitRow[];
}

export interface UnitDetail {
  k: number;
  threshold: number;
  population: number;
  c: number;
  rank: number;
}

export interface SliceRef {
  axis: Axis;
  index: number;
}

export interface TopSample {
  sample_id: string;
  vertebra_label: string;
  fractured: boolean;
  predicted_prob: number | null;
  split: string;
  has_patch: boolean;
  relevance: number;
  slice: SliceRef;
}

export interface TopSamplesPayload {
  unit: number;
  samples: TopSample[];
}

export interface SampleInfo {
  sample_id: string;
  vertebra_label: string;
  fractured: boolean;
  predicted_prob: number | null;
  split: string;
  has_patch: boolean;
  patch_shape: number[] | null;
  activation_shape: number[];
}

export interface SampleListPayload {
  samples: Omit<SampleInfo, "patch_shape" | "activation_shape">[];
}

export interface RelevanceRow {
  unit: number;
  relevance_rank: number;
  relevance: number;
  correlation_rank: number;
  slice: SliceRef;
}

export interface RelevancePayload {
  sample_id: string;
  rows: RelevanceRow[];
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

interface ResponseLike {
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (url: string) => Promise<ResponseLike>;

export class ApiClient {
  constructor(
    private fetchImpl: FetchLike = (url) => fetch(url),
    private base: string = "",
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(this.base + path);
    if (!response.ok) {
      let detail = `HTTP ${response.status}`;
      try {
        const body = (await response.json()) as { error?: string };
        if (body && body.error) detail = body.error;
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  getUnits(sort: "correlation" | "index" = "correlation"): Promise<RankingPayload> {
    return this.getJson(`/api/units?sort=${sort}`);
  }

  getUnit(k: number): Promise<UnitDetail> {
    return this.getJson(`/api/units/${k}`);
  }

  getTopSamples(k: number, n = 25, axis: Axis = "sagittal"): Promise<TopSamplesPayload> {
    return this.getJson(`/api/units/${k}/top-samples?n=${n}&axis=${axis}`);
  }

  getSamples(): Promise<SampleListPayload> {
    return this.getJson("/api/samples");
  }

  getSample(sampleId: string): Promise<SampleInfo> {
    return this.getJson(`/api/samples/${encodeURIComponent(sampleId)}`);
  }

  getRelevance(sampleId: string, top = 10): Promise<RelevancePayload> {
    return this.getJson(
      `/api/samples/${encodeURIComponent(sampleId)}/relevance?top=${top}`,
    );
  }

  /** Overlay raster URL; `native` indexes the activation grid (server maps). */
  overlayUrl(
    sampleId: string,
    unit: number,
    axis: Axis,
    index: number,
    alpha: number,
    native = false,
  ): string {
    const nativePart = native ? "&native=true" : "";
    return (
      `${this.base}/api/overlays/${encodeURIComponent(sampleId)}/${unit}/` +
      `${axis}/${index}.png?alpha=${alpha}${nativePart}`
    );
  }

  patchUrl(sampleId: string, axis: Axis, index: number): string {
    return `${this.base}/api/patches/${encodeURIComponent(sampleId)}/${axis}/${index}.png`;
  }
}
