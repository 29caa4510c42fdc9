// Client-side draft validation. The constraints and message texts are
// byte-for-byte the server's, so a blocked draft shows exactly what the
// API would have answered; the server stays authoritative.

export const CATEGORIES = ["0", "1", "2", "3", "4A", "4B", "4X"] as const;
export const NODULE_LOBES = ["RUL", "RML", "RLL", "LUL", "LLL"] as const;
export const NODULE_COMPOSITIONS = ["SOLID", "PART_SOLID", "GROUND_GLASS"] as const;

export const OUTCOME_NO_SIGNS = "NO_SIGNS";
export const OUTCOME_SUPERVISION = "MEDICAL_SUPERVISION";
export const OUTCOME_ADDITIONAL = "ADDITIONAL_EXAMINATION";

// what the server's narrative appends after "Assessment: <outcome>."
export const OUTCOME_PHRASES: Record<string, string> = {
  [OUTCOME_NO_SIGNS]: "No signs of pulmonary malignancy.",
  [OUTCOME_SUPERVISION]:
    "Medical supervision recommended; participant will be re-invited after " +
    "the configured interval.",
  [OUTCOME_ADDITIONAL]:
    "Additional examination required; participant is contacted immediately.",
};

// human labels for the outcome preview; display only, never sent anywhere
export const OUTCOME_LABELS: Record<string, string> = {
  [OUTCOME_NO_SIGNS]: "No signs of malignant neoplasms of the lungs",
  [OUTCOME_SUPERVISION]: "Medical supervision with re-invitation",
  [OUTCOME_ADDITIONAL]: "Additional examination, immediate contact",
};

export interface DraftError {
  field: string;
  code: string;
  message: string;
}

export interface NoduleDraftInput {
  lobe: unknown;
  composition: unknown;
  mean_diameter_mm: unknown;
}

// repr() of a string as Python would print it inside an f-string
export function pyRepr(value: unknown): string {
  if (value === null || value === undefined) return "None";
  if (typeof value !== "string") return String(value);
  const quote = value.includes("'") && !value.includes('"') ? '"' : "'";
  let out = "";
  for (const ch of value) {
    if (ch === "\\" || ch === quote) out += "\\" + ch;
    else if (ch === "\n") out += "\\n";
    else if (ch === "\r") out += "\\r";
    else if (ch === "\t") out += "\\t";
    else out += ch;
  }
  return quote + out + quote;
}

// str() of a float as Python would print it
export function pyFloat(n: number): string {
  if (Number.isNaN(n)) return "nan";
  if (n === Infinity) return "inf";
  if (n === -Infinity) return "-inf";
  if (Number.isInteger(n) && Math.abs(n) < 1e16) {
    return Object.is(n, -0) ? "-0.0" : `${n}.0`;
  }
  const abs = Math.abs(n);
  if (abs >= 1e16 || abs < 1e-4) {
    const [mantissa, exp] = n.toExponential().split("e") as [string, string];
    const sign = exp.startsWith("-") ? "-" : "+";
    const digits = exp.replace(/^[+-]/, "").padStart(2, "0");
    return `${mantissa}e${sign}${digits}`;
  }
  return String(n);
}

// float() of a form value as Python would: null/undefined and unparseable
// strings fail, "inf"/"nan" spellings succeed
function parseDiameter(value: unknown): number | null {
  if (typeof value === "number") return value;
  if (typeof value !== "string") return null;
  const raw = value.trim();
  if (!raw) return null;
  const lower = raw.toLowerCase();
  if (lower === "nan" || lower === "+nan" || lower === "-nan") return NaN;
  if (lower === "inf" || lower === "+inf" || lower === "infinity" || lower === "+infinity") {
    return Infinity;
  }
  if (lower === "-inf" || lower === "-infinity") return -Infinity;
  if (!/^[+-]?(\d+\.?\d*|\.\d+)(e[+-]?\d+)?$/i.test(raw)) return null;
  const n = Number(raw);
  return Number.isNaN(n) ? null : n;
}

export function requiresNodules(category: string): boolean {
  return category === "3" || category === "4A" || category === "4B" || category === "4X";
}

export function mapCategoryToOutcome(category: string): string {
  if (!(CATEGORIES as readonly string[]).includes(category)) {
    throw new Error(`unknown category ${pyRepr(category)}`);
  }
  if (category === "1" || category === "2") return OUTCOME_NO_SIGNS;
  if (category === "0" || category === "3") return OUTCOME_SUPERVISION;
  return OUTCOME_ADDITIONAL;
}

// Same checks in the same order as the server runs them, so the first
// entry is exactly the error the API would return for this draft.
export function validateDraft(
  category: string,
  nodules: NoduleDraftInput[],
): DraftError[] {
  const errors: DraftError[] = [];
  nodules.forEach((nodule, i) => {
    const field = `nodules[${i}]`;
    const lobe = String(nodule.lobe ?? "").toUpperCase();
    if (!(NODULE_LOBES as readonly string[]).includes(lobe)) {
      errors.push({
        field: `${field}.lobe`,
        code: "BAD_NODULE",
        message: `nodule ${i} has unknown lobe ${pyRepr(nodule.lobe)}`,
      });
      return;
    }
    const composition = String(nodule.composition ?? "").toUpperCase();
    if (!(NODULE_COMPOSITIONS as readonly string[]).includes(composition)) {
      errors.push({
        field: `${field}.composition`,
        code: "BAD_NODULE",
        message: `nodule ${i} has unknown composition ${pyRepr(nodule.composition)}`,
      });
      return;
    }
    const diameter = parseDiameter(nodule.mean_diameter_mm);
    if (diameter === null) {
      errors.push({
        field: `${field}.mean_diameter_mm`,
        code: "BAD_NODULE",
        message: `nodule ${i} has no numeric diameter`,
      });
      return;
    }
    if (!(diameter > 0 && diameter < 500)) {
      errors.push({
        field: `${field}.mean_diameter_mm`,
        code: "BAD_NODULE",
        message: `nodule ${i} diameter ${pyFloat(diameter)} outside (0, 500)`,
      });
    }
  });
  if (!(CATEGORIES as readonly string[]).includes(category)) {
    errors.push({
      field: "lungrads_category",
      code: "BAD_CATEGORY",
      message: `unknown category ${pyRepr(category)}`,
    });
  } else if (requiresNodules(category) && nodules.length === 0) {
    errors.push({
      field: "lungrads_category",
      code: "CATEGORY_NODULE_MISMATCH",
      message: `category ${category} requires at least one nodule`,
    });
  }
  return errors;
}
