// Typed client for the translation service. The panel never computes
// mixtures itself; everything goes through these four endpoints.

export interface AdapterInfo {
  id: string;
  task_name: string;
  rank: number;
  param_count: number;
  default_lambda: number;
}

export interface MixtureComponent {
  id: string;
  alpha: number;
  lambda: number;
}

export interface MixtureAck {
  components: MixtureComponent[];
  mixture_hash: string;
}

export interface Translation {
  translation: string;
  mixture_hash: string;
}

export interface Health {
  status: string;
  base_hash: string;
}

// RFC 7807 problem document, which is what the service returns on errors.
export interface Problem {
  title: string;
  status: number;
  detail?: string;
}

export class ApiError extends Error {
  constructor(readonly problem: Problem) {
    super(problem.detail ? `${problem.title}: ${problem.detail}` : problem.title);
    this.name = "ApiError";
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const res = await fetch(url, init);
  if (!res.ok) {
    let problem: Problem = { title: res.statusText, status: res.status };
    try {
      const body = await res.json();
      if (body && typeof body.title === "string") problem = body;
    } catch {
      // non-JSON error body; keep the status-line problem
    }
    throw new ApiError(problem);
  }
  return res.json();
}

export class Client {
  constructor(private baseUrl: string = "") {}

  health(): Promise<Health> {
    return request<Health>(`${this.baseUrl}/health`);
  }

  getAdapters(): Promise<AdapterInfo[]> {
    return request<AdapterInfo[]>(`${this.baseUrl}/adapters`);
  }

  putMixture(components: MixtureComponent[]): Promise<MixtureAck> {
    return request<MixtureAck>(`${this.baseUrl}/mixture`, {
      method: "PUT",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ components }),
    });
  }

  translate(text: string, signal?: AbortSignal): Promise<Translation> {
    return request<Translation>(`${this.baseUrl}/translate`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ text }),
      signal,
    });
  }
}
