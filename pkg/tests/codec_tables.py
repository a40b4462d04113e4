"""Table-driven 8b/10b reference encoder shared by the codec tests."""

# Published 8b/10b sub-block tables in transmission order, written out
# column by column: (RD- code, RD+ code).
TABLE_5B6B = {
    0: ("100111", "011000"), 1: ("011101", "100010"), 2: ("101101", "010010"), 3: ("110001", "110001"),
    4: ("110101", "001010"), 5: ("101001", "101001"), 6: ("011001", "011001"), 7: ("111000", "000111"),
    8: ("111001", "000110"), 9: ("100101", "100101"), 10: ("010101", "010101"), 11: ("110100", "110100"),
    12: ("001101", "001101"), 13: ("101100", "101100"), 14: ("011100", "011100"), 15: ("010111", "101000"),
    16: ("011011", "100100"), 17: ("100011", "100011"), 18: ("010011", "010011"), 19: ("110010", "110010"),
    20: ("001011", "001011"), 21: ("101010", "101010"), 22: ("011010", "011010"), 23: ("111010", "000101"),
    24: ("110011", "001100"), 25: ("100110", "100110"), 26: ("010110", "010110"), 27: ("110110", "001001"),
    28: ("001110", "001110"), 29: ("101110", "010001"), 30: ("011110", "100001"), 31: ("101011", "010100"),
}
K28_6B = ("001111", "110000")
TABLE_3B4B = {
    0: ("1011", "0100"), 1: ("1001", "1001"), 2: ("0101", "0101"), 3: ("1100", "0011"),
    4: ("1101", "0010"), 5: ("1010", "1010"), 6: ("0110", "0110"), 7: ("1110", "0001"),
}
A7 = ("0111", "1000")
TABLE_K3B4B = {
    0: ("1011", "0100"), 1: ("0110", "1001"), 2: ("1010", "0101"), 3: ("1100", "0011"),
    4: ("1101", "0010"), 5: ("0101", "1010"), 6: ("1001", "0110"), 7: ("0111", "1000"),
}

def _rd_after(code, rd):
    ones = code.count("1")
    if 2 * ones == len(code):
        return rd
    return 1 if 2 * ones > len(code) else -1


def oracle_encode(octet, is_control, rd):
    """Table-driven reference: returns (10-char code string, rd after)."""
    x, y = octet & 0x1F, octet >> 5
    col = 0 if rd < 0 else 1
    c6 = K28_6B[col] if (is_control and x == 28) else TABLE_5B6B[x][col]
    rd6 = _rd_after(c6, rd)
    col = 0 if rd6 < 0 else 1
    if is_control:
        c4 = TABLE_K3B4B[y][col]
    elif y == 7 and ((rd6 < 0 and x in (17, 18, 20)) or (rd6 > 0 and x in (11, 13, 14))):
        c4 = A7[col]
    else:
        c4 = TABLE_3B4B[y][col]
    return c6 + c4, _rd_after(c4, rd6)
