#!/usr/bin/env python3
"""Per-event DRAM energies for an 8Gb GDDR6 C-die from IDD currents.

Standard IDD method: an event costs the current it draws above the
standby current it displaces, times VDD, times the time it occupies.
Currents are per channel. Writes c-die-default.json next to this script.

The IDD values below are calibration inputs, chosen inside typical GDDR6
datasheet ranges so that the MAC energy lands at 0.6 pJ/bit.
"""

import json
import pathlib

VDD = 1.35  # V

# mA per channel
IDD0 = 151.2   # one activate-precharge cycle every tRC
IDD2N = 50.0   # precharge standby
IDD3N = 61.5   # active standby
IDD4R = 100.4  # gapless read
IDD4W = 102.3  # gapless write

# ns
T_RAS = 27.0
T_RP = 16.0
T_RC = T_RAS + T_RP
T_CCDS = 1.0

# A MAC micro-op draws three times the current of a gapless read.
MAC_READ_MULTIPLE = 3.0
COLUMN_BITS = 256


def pj(ma, ns):
    return ma * VDD * ns  # mA * V * ns = pJ


def derive():
    rd = pj(IDD4R - IDD3N, T_CCDS)
    wr = pj(IDD4W - IDD3N, T_CCDS)
    mac = MAC_READ_MULTIPLE * rd
    act_pre = pj(IDD0 * T_RC - (IDD3N * T_RAS + IDD2N * T_RP), 1.0)
    return {
        "name": "c-die-default",
        "e_mac_col_pj": round(mac, 2),
        # Two operand reads through the PU plus one result write.
        "e_ewmul_col_pj": round(mac + wr, 2),
        # One register read through the bank PU.
        "e_af_pj": round(rd, 2),
        "e_act_pre_pj": round(act_pre, 1),
        "e_rd_col_pj": round(rd, 2),
        "e_wr_col_pj": round(wr, 2),
        "e_pnm_slot_pj": 4.0,
        "e_cxl_pj_per_byte": 40.0,
        "p_background_w_per_channel": round(IDD3N * VDD / 1000.0, 4),
        "p_memctrl_w_per_two_channels": 0.3146,
        "p_scalar_core_w": 0.25,
        "p_ctrl_logic_w": 1.06,
        "p_host_w": 270.0,
    }


def main():
    e = derive()
    pj_per_bit = e["e_mac_col_pj"] / COLUMN_BITS
    out = pathlib.Path(__file__).with_name("c-die-default.json")
    out.write_text(json.dumps(e, indent=2) + "\n")
    print(f"wrote {out} (MAC {pj_per_bit:.3f} pJ/bit)")


if __name__ == "__main__":
    main()
